"""Config-driven experiment runs: resolve a config (preset overlay plus user
values), build the world, train, evaluate against the hidden latents, and write a
self-describing run directory.

Run directory layout::

    config.json   fully resolved config (presets expanded, world spec inlined)
    trace.csv     training trace, no wall-time columns
    model.bin     network parameters (little-endian float64)
    model.json    network manifest
    codes.csv     paired true / learned codes of the evaluation batch
    report.json   identifiability report plus run-level metrics
    plots/content.svg, plots/style.svg
    meta.json     seed, versions, wall times, divergence flag, file list
"""

from __future__ import annotations

import copy
import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .evalkit import CodeBatch, ReportConfig, diversity_score, make_ident_report
from .gan import Diverged, GanTrainConfig, TraceRow, WorldSource, train_gan, write_trace_csv
from .inversion import InversionConfig, invert
from .kernels import median_width, mmd2_unbiased
from .ldm import LdmTraceRow, LdmTrainConfig, train_ldm
from .models import GanBundle, LdmBundle, encode_ldm
from .svgplot import bar_chart, scatter_panels
from .synthworld import WorldSpec, build_world, default_world_spec, sample_domain


class ConfigError(ValueError):
    """Invalid experiment config; the message starts with the offending field path."""


_OVERSPECIFIED = {"d_c_hat": 4, "d_s_hat": 4, "steps": 20000}

PRESETS: dict[str, dict] = {
    "paper-defaults": {"method": "gan", "gan": {**_OVERSPECIFIED, "lam": 0.3, "p": 1.0}},
    "lambda-zero-ablation": {"method": "gan", "gan": {**_OVERSPECIFIED, "lam": 0.0, "p": 1.0}},
    "lp-half": {"method": "gan", "gan": {**_OVERSPECIFIED, "lam": 0.3, "p": 0.5}},
    # two-domain toy with linear content and style encoders
    "appendixG-toy": {"method": "gan", "gan": {**_OVERSPECIFIED, "lam": 0.3, "encoder_hidden": []}},
    # total learned dimension below d_C + d_S
    "underdim-case1": {"method": "gan", "gan": {"d_c_hat": 1, "d_s_hat": 1, "steps": 20000, "lam": 0.3}},
    # content dimension too small, total sufficient
    "underdim-case2": {"method": "gan", "gan": {"d_c_hat": 1, "d_s_hat": 3, "steps": 20000, "lam": 0.3}},
    # style dimension too small
    "underdim-case3": {"method": "gan", "gan": {"d_c_hat": 3, "d_s_hat": 1, "steps": 20000, "lam": 0.3}},
}

_WORLD_PARAMS = ("d_c", "d_s", "n_domains", "ambient_dim", "mixing_depth", "seed", "style_spacing")


@dataclass
class EvalConfig:
    samples_per_domain: int = 500
    inversion: InversionConfig = field(default_factory=InversionConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    diversity_contents: int = 10
    diversity_styles: int = 10

    def validate(self) -> None:
        if self.samples_per_domain < 10:
            raise ValueError("samples_per_domain must be at least 10")
        if self.diversity_contents < 2 or self.diversity_styles < 2:
            raise ValueError("diversity counts must be at least 2")
        self.inversion.validate()
        if not 0 < self.report.tau_rel < 1:
            raise ValueError("report.tau_rel must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        _reject_unknown(d, cls, "eval")
        inv = d.pop("inversion", {})
        rep = d.pop("report", {})
        _reject_unknown(inv, InversionConfig, "eval.inversion")
        _reject_unknown(rep, ReportConfig, "eval.report")
        return cls(inversion=InversionConfig(**inv), report=ReportConfig(**rep), **d)

    def to_dict(self) -> dict:
        return asdict(self)


def _reject_unknown(d: dict, cls, where: str) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    world: WorldSpec
    method: str
    train: GanTrainConfig | LdmTrainConfig
    eval: EvalConfig
    seed: int = 0
    preset: str | None = None

    def to_dict(self) -> dict:
        return {"preset": self.preset, "seed": self.seed, "method": self.method,
                "world": self.world.to_dict(), self.method: self.train.to_dict(), "eval": self.eval.to_dict()}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def expand_preset(raw: dict) -> dict:
    """Overlay the user's values on the named preset (user values win). Pure."""
    name = raw.get("preset")
    if name is None:
        return copy.deepcopy(raw)
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return _merge(PRESETS[name], raw)


def _resolve_world(d: dict | None) -> WorldSpec:
    d = d or {}
    try:
        if "content" in d:
            spec = WorldSpec.from_dict(d)
        else:
            unknown = set(d) - set(_WORLD_PARAMS)
            if unknown:
                raise ConfigError(f"world: unknown fields {sorted(unknown)}")
            spec = default_world_spec(**d)
        spec.validate()
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"world: {exc}") from exc
    return spec


def resolve_config(raw: dict, seed: int | None = None) -> ExperimentConfig:
    """Expand the preset, apply the seed override and validate every section."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a JSON object")
    d = expand_preset(raw)
    unknown = set(d) - {"preset", "seed", "method", "world", "gan", "ldm", "eval"}
    if unknown:
        raise ConfigError(f"<root>: unknown fields {sorted(unknown)}")
    method = d.get("method", "gan")
    if method not in ("gan", "ldm"):
        raise ConfigError(f"method: must be 'gan' or 'ldm', got {method!r}")
    seed = int(d.get("seed", 0) if seed is None else seed)
    world = _resolve_world(d.get("world"))
    cls = GanTrainConfig if method == "gan" else LdmTrainConfig
    try:
        train = cls.from_dict({**d.get(method, {}), "seed": seed})
        train.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{method}: {exc}") from exc
    try:
        ev = EvalConfig.from_dict(d.get("eval", {}))
        ev.inversion.seed = seed
        ev.report.seed = seed
        ev.validate()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"eval: {exc}") from exc
    return ExperimentConfig(world, method, train, ev, seed, d.get("preset"))


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"<file>: {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: not valid JSON ({exc})") from exc
    return resolve_config(raw, seed)


# --- running ---------------------------------------------------------------------------

@dataclass
class RunDir:
    path: Path
    diverged: bool
    report: dict | None


def gan_trace_columns(n_domains: int) -> list[str]:
    return (["step"] + [f"disc_loss_{n}" for n in range(n_domains)]
            + [f"gen_loss_{n}" for n in range(n_domains)] + ["sparsity"]
            + [f"mmd_to_data_{n}" for n in range(n_domains)])


LDM_TRACE_COLUMNS = ["step", "total", "dm", "indep", "recon", "sparse", "content_mmd"]


def content_mmd(contents: list[np.ndarray]) -> float:
    """Mean over domain pairs of the unbiased MMD^2 between content codes (median-heuristic width)."""
    pairs = list(combinations(range(len(contents)), 2))
    if not pairs:
        return 0.0
    w = median_width(*contents)
    return float(np.mean([mmd2_unbiased(contents[i], contents[j], w) for i, j in pairs]))


def evaluation_batches(world, cfg: ExperimentConfig):
    rng = np.random.default_rng([cfg.seed, 77])
    return [sample_domain(world, n, cfg.eval.samples_per_domain, rng) for n in range(world.spec.n_domains)]


def encode_batches(bundle, batches, cfg: ExperimentConfig) -> tuple[CodeBatch, dict]:
    """Learned codes for held-out batches: inversion for GAN bundles, the encoder for LDM bundles."""
    extra = {}
    if isinstance(bundle, GanBundle):
        invs = [invert(bundle, b.x, cfg.eval.inversion, domain=b.domain) for b in batches]
        learned_c = [i.c for i in invs]
        learned_s = [i.s for i in invs]
        extra["inversion_residual_median"] = float(np.median(np.concatenate([i.residual for i in invs])))
    else:
        enc = [encode_ldm(bundle, b.x) for b in batches]
        learned_c = [e[0] for e in enc]
        learned_s = [e[1] for e in enc]
    extra["content_mmd"] = content_mmd(learned_c)
    codes = CodeBatch(np.vstack([b.c for b in batches]), np.vstack([b.s for b in batches]),
                      np.vstack(learned_c), np.vstack(learned_s),
                      np.concatenate([np.full(len(b), b.domain) for b in batches]))
    return codes, extra


def _principal_scores(a: np.ndarray, k: int = 2) -> np.ndarray:
    a = a - a.mean(0)
    _, _, vt = np.linalg.svd(a, full_matrices=False)
    scores = a @ vt[:k].T
    if scores.shape[1] < k:
        scores = np.hstack([scores, np.zeros((len(a), k - scores.shape[1]))])
    return scores


def write_plots(plot_dir: Path, codes: CodeBatch, label: str = "") -> list[str]:
    plot_dir.mkdir(parents=True, exist_ok=True)
    t, l = _principal_scores(codes.true_c), _principal_scores(codes.learned_c)
    panels = [(t[:, k], l[:, k], f"{label} content PC{k + 1}".strip(), f"true c, PC{k + 1}",
               f"learned c, PC{k + 1}") for k in range(2)]
    scatter_panels(plot_dir / "content.svg", panels, codes.domain)
    m = np.abs(codes.learned_s).mean(0)
    bar_chart(plot_dir / "style.svg", m, [f"s{j}" for j in range(len(m))],
              f"{label} mean |s_hat_j|".strip())
    return ["plots/content.svg", "plots/style.svg"]


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out: str | Path, log=None) -> RunDir:
    """Train and evaluate one configuration into ``out``.

    On divergence the directory keeps config, partial trace and model, and meta.json
    records ``diverged: true``; no report is written.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    _dump_json(out / "config.json", cfg.to_dict())
    world = build_world(cfg.world)
    source = WorldSource(world)
    files = ["config.json", "trace.csv", "model.bin", "model.json"]
    diverged, message = False, None
    t0 = time.perf_counter()
    try:
        if cfg.method == "gan":
            bundle, trace = train_gan(source, cfg.train, log=log)
        else:
            bundle, trace = train_ldm(source, cfg.train, log=log)
    except Diverged as exc:
        diverged, message = True, str(exc)
        bundle, trace = exc.bundle, exc.trace
    train_time = time.perf_counter() - t0
    columns = gan_trace_columns(world.spec.n_domains) if cfg.method == "gan" else LDM_TRACE_COLUMNS
    write_trace_csv(out / "trace.csv", trace, columns)
    bundle.save(out / "model")
    meta = {"seed": cfg.seed, "method": cfg.method, "preset": cfg.preset, "diverged": diverged,
            "versions": {"cslab": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "train_wall_time": train_time, "steps_completed": trace[-1].step if trace else 0}
    report = None
    if diverged:
        meta["divergence"] = message
    else:
        codes, extra = encode_batches(bundle, evaluation_batches(world, cfg), cfg)
        codes.to_csv(out / "codes.csv")
        if cfg.method == "gan":
            ident = make_ident_report(codes, config=cfg.eval.report)
            ident.notes.append("content invariance probe not run: inversion is not smooth at the probe step")
            rng = np.random.default_rng([cfg.seed, 88])
            extra["diversity"] = float(np.mean([
                diversity_score(bundle, cfg.eval.diversity_contents, cfg.eval.diversity_styles, n, rng)
                for n in range(bundle.n_domains)]))
        else:
            ident = make_ident_report(codes, lambda x: encode_ldm(bundle, x)[0], world, cfg.eval.report)
        report = {**ident.to_dict(), **extra,
                  "mmd_to_data": (trace[-1].mmd_to_data if cfg.method == "gan" and trace else None),
                  "final_step": trace[-1].step if trace else 0}
        _dump_json(out / "report.json", report)
        files += ["codes.csv", "report.json"] + write_plots(out / "plots", codes)
    meta["wall_time"] = time.perf_counter() - t_start
    meta["files"] = sorted(files + ["meta.json"])
    _dump_json(out / "meta.json", meta)
    return RunDir(out, diverged, report)


def load_bundle(run: str | Path):
    run = Path(run)
    kind = json.loads((run / "model.json").read_text())["meta"]["kind"]
    return GanBundle.load(run / "model") if kind == "gan" else LdmBundle.load(run / "model")


# --- comparison report -------------------------------------------------------------------

REPORT_COLUMNS = ["run", "method", "preset", "seed", "status", "mmd_to_data", "content_mmd", "content_r2",
                  "style_r2", "leakage_c_from_s", "leakage_s_from_c", "effective_style_dim", "diversity",
                  "wall_time"]


def _row_for(run: Path) -> dict:
    row = {c: "" for c in REPORT_COLUMNS}
    row["run"] = run.name
    try:
        meta = json.loads((run / "meta.json").read_text())
        row.update(method=meta.get("method", ""), preset=meta.get("preset") or "", seed=meta.get("seed", ""),
                   wall_time=f"{meta.get('train_wall_time', float('nan')):.2f}")
    except (FileNotFoundError, json.JSONDecodeError):
        pass
    try:
        rep = json.loads((run / "report.json").read_text())
    except (FileNotFoundError, json.JSONDecodeError):
        row["status"] = "incomplete"
        return row
    row["status"] = "ok"
    m = rep.get("mmd_to_data")
    row["mmd_to_data"] = "" if m is None else f"{float(np.mean(m)):.4f}"
    for k in ("content_mmd", "content_r2", "style_r2", "leakage_c_from_s", "leakage_s_from_c", "diversity"):
        if rep.get(k) is not None:
            row[k] = f"{rep[k]:.4f}"
    row["effective_style_dim"] = rep.get("effective_style_dim", "")
    return row


def compare_runs(runs: list[str | Path], out: str | Path) -> list[dict]:
    """Write comparison.csv, a metric bar chart and per-run plots under ``out``."""
    if not runs:
        raise ValueError("report needs at least one run directory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [_row_for(Path(r)) for r in runs]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    for r in runs:
        r = Path(r)
        if (r / "codes.csv").exists():
            write_plots(out / "plots" / r.name, CodeBatch.from_csv(r / "codes.csv"), r.name)
    ok = [row for row in rows if row["wall_time"] not in ("", "nan")]
    if ok:
        bar_chart(out / "wall_time.svg", [float(row["wall_time"]) for row in ok],
                  [row["run"] for row in ok], "training wall time (s)")
    return rows

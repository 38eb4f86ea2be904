"""Command line entry point: ``cslab <subcommand> ... --seed S --out PATH``.

Exit codes: 0 success, 2 configuration or input error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .evalkit import CodeBatch, make_ident_report
from .experiment import (PRESETS, ConfigError, EvalConfig, compare_runs, load_bundle, load_config,
                         resolve_config, run_experiment)
from .inversion import InversionConfig, invert, translate_guided, translate_sampled
from .models import GanBundle, encode_ldm
from .numcore import mlp_apply
from .synthworld import WorldSpec, build_world, probe_domain_variability, sample_domain, write_batches_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _raw_config(args) -> dict:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"<file>: {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file>: not valid JSON ({exc})") from exc
    if getattr(args, "preset", None):
        raw = {**raw, "preset": args.preset}
    return raw


def _read_rows(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Observation rows from a CSV with ``x_*`` columns and an optional ``domain`` column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    if not xcols:
        raise ValueError(f"{path}: no x_* columns")
    x = np.array([[float(r[i]) for i in xcols] for r in body]).reshape(len(body), len(xcols))
    dom = None
    if "domain" in header:
        j = header.index("domain")
        dom = np.array([int(r[j]) for r in body])
    return x, dom


def _write_matrix(path: str | Path, blocks: dict[str, np.ndarray]) -> None:
    header = [f"{k}_{i}" if v.ndim == 2 else k for k, v in blocks.items()
              for i in range(v.shape[1] if v.ndim == 2 else 1)]
    n = next(iter(blocks.values())).shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in range(n):
            vals = []
            for v in blocks.values():
                vals += [repr(float(a)) for a in (v[r] if v.ndim == 2 else [v[r]])]
            w.writerow(vals)


def _inversion_config(run: Path, seed: int) -> InversionConfig:
    cfg = json.loads((run / "config.json").read_text())
    inv = InversionConfig(**cfg.get("eval", {}).get("inversion", {}))
    inv.seed = seed
    return inv


# --- subcommands -----------------------------------------------------------------------

def cmd_gen_world(args) -> int:
    cfg = resolve_config(_raw_config(args), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(cfg.world)
    cfg.world.save(out / "world.json")
    rng = np.random.default_rng([args.seed, 5])
    batches = [sample_domain(world, n, args.n, rng) for n in range(cfg.world.n_domains)]
    write_batches_csv(out / "samples.csv", batches)
    print(f"wrote {out / 'world.json'} and {args.n} samples per domain to {out / 'samples.csv'}")
    return EXIT_OK


def cmd_verify_world(args) -> int:
    if args.world:
        try:
            spec = WorldSpec.load(args.world)
        except (FileNotFoundError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"world: cannot load {args.world} ({exc})") from exc
    else:
        raw = _raw_config(args)
        try:
            spec = resolve_config(raw, args.seed).world
        except ConfigError as exc:
            if "identical" not in str(exc):
                raise
            spec = WorldSpec.from_dict(raw["world"])
    identical = [(i, j) for i in range(spec.n_domains) for j in range(i + 1, spec.n_domains)
                 if spec.styles[i].same_as(spec.styles[j])]
    for i, j in identical:
        print(f"warning: domains {i} and {j} have identical style distributions", file=sys.stderr)
    world = build_world(spec, allow_identical_styles=bool(identical))
    rep = probe_domain_variability(world, args.n_sets, args.n_mc, np.random.default_rng([args.seed, 9]))
    doc = rep.to_dict()
    doc["identical_style_pairs"] = [list(p) for p in identical]
    for k, b in enumerate(rep.sets):
        print(f"set {k:3d}: gap {b.gap:.4f}  se {b.se:.4f}  {'variable' if b.flagged else '-'}")
    print(f"flagged fraction: {rep.flagged_fraction:.3f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(_raw_config(args), args.seed)

    def log(row, _bundle):
        if not args.quiet:
            print(json.dumps({k: v for k, v in row.csv_fields().items()}), flush=True)

    run = run_experiment(cfg, args.out, log=log)
    if run.diverged:
        print(f"training diverged; partial results in {run.path}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({k: run.report[k] for k in ("content_r2", "style_r2", "leakage_c_from_s",
                                                  "effective_style_dim")}))
    return EXIT_OK


def cmd_invert(args) -> int:
    run = Path(args.run)
    bundle = load_bundle(run)
    x, dom = _read_rows(args.input)
    if isinstance(bundle, GanBundle):
        cfg = _inversion_config(run, args.seed)
        if args.domain is not None:
            res = invert(bundle, x, cfg, domain=args.domain)
            c, s, resid = res.c, res.s, res.residual
        elif dom is not None:
            c = np.zeros((len(x), bundle.d_c))
            s = np.zeros((len(x), bundle.d_s))
            resid = np.zeros(len(x))
            for n in np.unique(dom):
                idx = dom == n
                res = invert(bundle, x[idx], cfg, domain=int(n))
                c[idx], s[idx], resid[idx] = res.c, res.s, res.residual
        else:
            res = invert(bundle, x, cfg)
            c, s, resid = res.c, res.s, res.residual
    else:
        c, s = encode_ldm(bundle, x)
        recon = mlp_apply(bundle.r, np.hstack([c, s]))
        resid = ((recon - x) ** 2).sum(1)
    _write_matrix(args.out, {"c_hat": c, "s_hat": s, "residual": resid})
    return EXIT_OK


def cmd_translate(args) -> int:
    run = Path(args.run)
    bundle = load_bundle(run)
    if not isinstance(bundle, GanBundle):
        raise ConfigError("run: translation needs a GAN run")
    x, _ = _read_rows(args.input)
    cfg = _inversion_config(run, args.seed)
    if args.reference:
        ref, _ = _read_rows(args.reference)
        if len(ref) != len(x):
            raise ValueError("reference CSV must have as many rows as the input")
        y = translate_guided(bundle, x, args.src, ref, args.tgt, cfg)
    else:
        y = translate_sampled(bundle, x, args.src, args.tgt, np.random.default_rng([args.seed, 21]), cfg)
    _write_matrix(args.out, {"x": y})
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = json.loads((run / "config.json").read_text())
    ev = EvalConfig.from_dict(cfg.get("eval", {}))
    ev.report.seed = args.seed
    codes = CodeBatch.from_csv(run / "codes.csv")
    rep = make_ident_report(codes, config=ev.report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in rep.to_dict().items() if k != "notes"}))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = compare_runs(args.runs, args.out)
    for row in rows:
        print(",".join(str(row[k]) for k in row))
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cslab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help=out_help)
        return sp

    sp = common(sub.add_parser("gen-world", help="write a world spec and labelled samples"), "output directory")
    sp.add_argument("--config")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--n", type=int, default=1000, help="samples per domain")
    sp.set_defaults(func=cmd_gen_world)

    sp = common(sub.add_parser("verify-world", help="probe domain variability"), "output JSON file")
    sp.add_argument("--config")
    sp.add_argument("--world", help="world.json written by gen-world")
    sp.add_argument("--n-sets", type=int, default=20)
    sp.add_argument("--n-mc", type=int, default=5000)
    sp.set_defaults(func=cmd_verify_world)

    sp = common(sub.add_parser("train", help="train and evaluate one configuration"), "run directory")
    sp.add_argument("--config")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("invert", help="recover codes for observation rows"), "output CSV")
    sp.add_argument("--run", required=True)
    sp.add_argument("--input", required=True, help="CSV with x_* columns (and optional domain)")
    sp.add_argument("--domain", type=int)
    sp.set_defaults(func=cmd_invert)

    sp = common(sub.add_parser("translate", help="translate rows between domains"), "output CSV")
    sp.add_argument("--run", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--src", type=int, required=True)
    sp.add_argument("--tgt", type=int, required=True)
    sp.add_argument("--reference", help="CSV of reference rows for guided translation")
    sp.set_defaults(func=cmd_translate)

    sp = common(sub.add_parser("eval", help="recompute the report from a run's codes.csv"), "output directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("report", help="comparison table over run directories"), "output directory")
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic multi-domain worlds with known content/style latents.

A world draws content ``c`` from one mixture shared by all domains and style
``s`` from a per-domain mixture, independently, then pushes ``z = (c, s)``
through an invertible mixing map onto a ``d_c + d_s`` dimensional manifold
in ambient space.  Domain indices are 0-based.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ortho_group

COV_FLOOR = 1e-12
NONLINEARITIES = ("tanh_plus", "leaky_relu")


class WorldError(ValueError):
    pass


class OffManifoldError(ValueError):
    pass


@dataclass
class Mixture:
    """Gaussian mixture; a single component is a plain Gaussian."""
    means: list[list[float]]
    covs: list[list[list[float]]]
    weights: list[float]

    @classmethod
    def gaussian(cls, mean, cov) -> "Mixture":
        return cls([list(map(float, mean))], [np.asarray(cov, float).tolist()], [1.0])

    @property
    def dim(self) -> int:
        return len(self.means[0])

    def validate(self, name: str, dim: int) -> None:
        if not self.means or len(self.means) != len(self.covs) or len(self.means) != len(self.weights):
            raise WorldError(f"{name}: means, covs and weights must have equal non-zero length")
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
            raise WorldError(f"{name}: weights must be non-negative and sum to 1")
        for k, (m, c) in enumerate(zip(self.means, self.covs)):
            c = np.asarray(c, float)
            if len(m) != dim or c.shape != (dim, dim):
                raise WorldError(f"{name}[{k}]: expected dimension {dim}")
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
                raise WorldError(f"{name}[{k}]: covariance is not symmetric positive semi-definite")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        dim = self.dim
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        noise = rng.standard_normal((n, dim))
        out = np.empty((n, dim))
        for k, (m, c) in enumerate(zip(self.means, self.covs)):
            idx = comp == k
            chol = np.linalg.cholesky(np.asarray(c, float) + COV_FLOOR * np.eye(dim))
            out[idx] = np.asarray(m) + noise[idx] @ chol.T
        return out

    def same_as(self, other: "Mixture") -> bool:
        return (np.allclose(self.means, other.means) and np.allclose(self.covs, other.covs)
                and np.allclose(self.weights, other.weights))


@dataclass
class WorldSpec:
    d_c: int
    d_s: int
    n_domains: int
    ambient_dim: int
    content: Mixture
    styles: list[Mixture]
    mixing_depth: int = 3
    nonlinearity: str = "tanh_plus"
    seed: int = 0

    @property
    def latent_dim(self) -> int:
        return self.d_c + self.d_s

    def validate(self, allow_identical_styles: bool = False) -> None:
        if self.d_c < 1 or self.d_s < 1:
            raise WorldError("d_c and d_s must be positive")
        if self.n_domains < 2:
            raise WorldError("a world needs at least 2 domains")
        if len(self.styles) != self.n_domains:
            raise WorldError(f"expected {self.n_domains} style distributions, got {len(self.styles)}")
        if self.ambient_dim < self.latent_dim:
            raise WorldError("ambient_dim must be at least d_c + d_s")
        if self.mixing_depth < 0:
            raise WorldError("mixing_depth must be non-negative")
        if self.nonlinearity not in NONLINEARITIES:
            raise WorldError(f"unknown nonlinearity {self.nonlinearity!r}")
        self.content.validate("content", self.d_c)
        for n, st in enumerate(self.styles):
            st.validate(f"styles[{n}]", self.d_s)
        if not allow_identical_styles:
            for i in range(self.n_domains):
                for j in range(i + 1, self.n_domains):
                    if self.styles[i].same_as(self.styles[j]):
                        raise WorldError(f"style distributions {i} and {j} are identical")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        d["content"] = Mixture(**d["content"])
        d["styles"] = [Mixture(**s) for s in d["styles"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_world_spec(d_c: int = 2, d_s: int = 2, n_domains: int = 2, ambient_dim: int | None = None,
                       mixing_depth: int = 3, seed: int = 0, style_spacing: float = 2.0) -> WorldSpec:
    """Content: 3-component Gaussian mixture.  Style: one Gaussian per domain with
    means ``style_spacing`` apart in every coordinate and distinct diagonal covariances."""
    rng = np.random.default_rng([seed, 7919])
    angles = rng.uniform(0, 2 * np.pi) + np.arange(3) * 2 * np.pi / 3
    c_means = []
    for a in angles:
        m = np.zeros(d_c)
        m[0] = 1.2 * np.cos(a)
        if d_c > 1:
            m[1] = 1.2 * np.sin(a)
        c_means.append(m.tolist())
    c_covs = [np.diag(rng.uniform(0.25, 0.45, d_c)).tolist() for _ in range(3)]
    content = Mixture(c_means, c_covs, [0.4, 0.35, 0.25])
    signs = np.where(np.arange(d_s) % 2 == 0, 1.0, -1.0)
    styles = []
    for n in range(n_domains):
        mean = (n - (n_domains - 1) / 2) * style_spacing * signs
        var = rng.uniform(0.3, 0.7, d_s)
        styles.append(Mixture.gaussian(mean, np.diag(var)))
    return WorldSpec(d_c, d_s, n_domains, ambient_dim or d_c + d_s + 2, content, styles,
                     mixing_depth, "tanh_plus", seed)


# --- mixing map ------------------------------------------------------------------

def _nl_forward(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(z > 0, z, 0.2 * z)
    return z + 0.5 * np.tanh(z)


def _nl_inverse(kind: str, y: np.ndarray) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(y > 0, y, y / 0.2)
    # x + 0.5 tanh(x) = y is strictly increasing with slope in [1, 1.5]; Newton from y/1.25
    x = y / 1.25
    for _ in range(60):
        t = np.tanh(x)
        step = (x + 0.5 * t - y) / (1.0 + 0.5 * (1.0 - t * t))
        x = x - step
        if np.max(np.abs(step), initial=0.0) < 1e-15:
            break
    return x


@dataclass
class MixingMap:
    rotations: list[np.ndarray]
    shifts: list[np.ndarray]
    nonlinearity: str
    embedding: np.ndarray  # ambient x latent, orthonormal columns

    @property
    def depth(self) -> int:
        return len(self.rotations)

    def forward(self, z: np.ndarray) -> np.ndarray:
        h = np.asarray(z, float)
        for q, b in zip(self.rotations, self.shifts):
            h = _nl_forward(self.nonlinearity, h @ q + b)
        return h @ self.embedding.T

    def inverse_latent(self, h: np.ndarray) -> np.ndarray:
        for q, b in zip(reversed(self.rotations), reversed(self.shifts)):
            h = (_nl_inverse(self.nonlinearity, h) - b) @ q.T
        return h

    def layer_roundtrip_errors(self, z: np.ndarray) -> list[float]:
        errs = []
        h = z
        for q, b in zip(self.rotations, self.shifts):
            y = _nl_forward(self.nonlinearity, h @ q + b)
            back = (_nl_inverse(self.nonlinearity, y) - b) @ q.T
            errs.append(float(np.max(np.abs(back - h), initial=0.0)))
            h = y
        return errs


@dataclass
class LabeledBatch:
    x: np.ndarray
    c: np.ndarray
    s: np.ndarray
    domain: int

    def __len__(self) -> int:
        return self.x.shape[0]


def write_batches_csv(path: str | Path, batches: list[LabeledBatch]) -> None:
    """CSV with header ``domain, x_0.., c_0.., s_0..``."""
    first = batches[0]
    header = (["domain"] + [f"x_{i}" for i in range(first.x.shape[1])]
              + [f"c_{i}" for i in range(first.c.shape[1])] + [f"s_{i}" for i in range(first.s.shape[1])])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for b in batches:
            for xi, ci, si in zip(b.x, b.c, b.s):
                w.writerow([b.domain] + [repr(float(v)) for v in (*xi, *ci, *si)])


class World:
    def __init__(self, spec: WorldSpec, mixing: MixingMap):
        self.spec = spec
        self.mixing = mixing
        self.rng = np.random.default_rng([spec.seed, 1])

    def stream(self, index: int) -> np.random.Generator:
        """Independent RNG stream derived from the world seed."""
        return np.random.default_rng([self.spec.seed, 1000 + index])

    def mix(self, c: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self.mixing.forward(np.hstack([c, s]))

    def content_of(self, x: np.ndarray) -> np.ndarray:
        return invert_mixing(self, x)[0]


def build_world(spec: WorldSpec, check_samples: int = 1000, allow_identical_styles: bool = False) -> World:
    spec.validate(allow_identical_styles=allow_identical_styles)
    rng = np.random.default_rng([spec.seed, 0])
    D = spec.latent_dim
    rotations, shifts = [], []
    for _ in range(spec.mixing_depth):
        rotations.append(ortho_group.rvs(D, random_state=rng) if D > 1 else np.eye(1))
        shifts.append(rng.uniform(-0.5, 0.5, D))
    if spec.mixing_depth == 0:
        emb = np.zeros((spec.ambient_dim, D))
        emb[:D, :D] = np.eye(D)
    else:
        emb, _ = np.linalg.qr(rng.standard_normal((spec.ambient_dim, D)))
    mixing = MixingMap(rotations, shifts, spec.nonlinearity, emb)
    world = World(spec, mixing)
    # certificate: each layer and the full map must invert to round-off
    probe_rng = np.random.default_rng([spec.seed, 2])
    z = np.vstack([np.hstack([spec.content.sample(check_samples, probe_rng),
                              spec.styles[n].sample(check_samples, probe_rng)])
                   for n in range(spec.n_domains)])
    for k, err in enumerate(mixing.layer_roundtrip_errors(z)):
        if not err < 1e-9:
            raise WorldError(f"mixing layer {k} fails the inversion certificate (error {err:.3g})")
    back = mixing.inverse_latent(mixing.forward(z) @ emb)
    if not np.max(np.abs(back - z)) < 1e-9:
        raise WorldError("composed mixing map fails the inversion certificate")
    return world


def sample_domain(world: World, n: int, batch: int, rng: np.random.Generator | None = None) -> LabeledBatch:
    spec = world.spec
    if not 0 <= n < spec.n_domains:
        raise IndexError(f"domain {n} out of range for {spec.n_domains} domains")
    rng = world.rng if rng is None else rng
    if batch == 0:
        return LabeledBatch(np.zeros((0, spec.ambient_dim)), np.zeros((0, spec.d_c)),
                            np.zeros((0, spec.d_s)), n)
    c = spec.content.sample(batch, rng)
    s = spec.styles[n].sample(batch, rng)
    return LabeledBatch(world.mix(c, s), c, s, n)


def invert_mixing(world: World, x: np.ndarray, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, float))
    emb = world.mixing.embedding
    h = x @ emb
    resid = np.linalg.norm(x - h @ emb.T, axis=1)
    if resid.size and resid.max() > tol:
        raise OffManifoldError(f"{int((resid > tol).sum())} rows lie off the world manifold "
                               f"(max residual {resid.max():.3g})")
    z = world.mixing.inverse_latent(h)
    d_c = world.spec.d_c
    return z[:, :d_c], z[:, d_c:]


# --- domain variability probe --------------------------------------------------------

@dataclass
class BoxResult:
    lower: list[float]
    upper: list[float]
    probs: list[float]
    gap: float
    se: float
    flagged: bool


@dataclass
class VariabilityReport:
    sets: list[BoxResult] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def flagged_fraction(self) -> float:
        return float(np.mean([b.flagged for b in self.sets])) if self.sets else 0.0

    def to_dict(self) -> dict:
        """JSON-safe form; unbounded box edges become None."""
        def edges(v):
            return [x if np.isfinite(x) else None for x in v]
        sets = [{**asdict(b), "lower": edges(b.lower), "upper": edges(b.upper)} for b in self.sets]
        return {"n_sets": len(self.sets), "flagged_fraction": self.flagged_fraction,
                "sets": sets, "notes": list(self.notes)}


def _latent_samples(world: World, n_mc: int, rng: np.random.Generator) -> list[np.ndarray]:
    spec = world.spec
    return [np.hstack([spec.content.sample(n_mc, rng), spec.styles[n].sample(n_mc, rng)])
            for n in range(spec.n_domains)]


def _score_box(samples: list[np.ndarray], lower: np.ndarray, upper: np.ndarray) -> BoxResult:
    probs = np.array([np.mean(np.all((z > lower) & (z < upper), axis=1)) for z in samples])
    n_mc = samples[0].shape[0]
    best_gap, best_se = 0.0, 0.0
    for i in range(len(probs)):
        for j in range(i + 1, len(probs)):
            gap = abs(probs[i] - probs[j])
            if gap >= best_gap:
                se = np.sqrt((probs[i] * (1 - probs[i]) + probs[j] * (1 - probs[j])) / n_mc)
                best_gap, best_se = gap, se
    flagged = best_gap > 3.0 * best_se and best_gap > 0
    return BoxResult(lower.tolist(), upper.tolist(), probs.tolist(), float(best_gap), float(best_se),
                     bool(flagged))


def box_probabilities(world: World, lower, upper, n_mc: int, rng: np.random.Generator) -> BoxResult:
    """Monte-Carlo P_n[box] for every domain for one explicit latent box."""
    return _score_box(_latent_samples(world, n_mc, rng), np.asarray(lower, float), np.asarray(upper, float))


def probe_domain_variability(world: World, n_sets: int, n_mc: int, rng: np.random.Generator,
                             max_retries: int = 20) -> VariabilityReport:
    """Random axis-aligned boxes that constrain at least one style coordinate (so they
    are not of the form B x S); per box, the largest pairwise gap between domain
    probabilities and whether it exceeds 3 combined standard errors."""
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    report = VariabilityReport()
    if n_sets <= 0:
        return report
    spec = world.spec
    samples = _latent_samples(world, n_mc, rng)
    pooled = np.vstack(samples)
    D = spec.latent_dim
    for k in range(n_sets):
        for _ in range(max_retries):
            lower = np.full(D, -np.inf)
            upper = np.full(D, np.inf)
            style_coord = spec.d_c + rng.integers(spec.d_s)
            coords = {int(style_coord)} | {int(j) for j in range(D) if rng.random() < 0.3}
            for j in coords:
                a, b = np.sort(np.quantile(pooled[:, j], rng.uniform(0, 1, 2)))
                kind = rng.integers(3)
                if kind == 0:
                    lower[j] = a
                elif kind == 1:
                    upper[j] = b
                else:
                    lower[j], upper[j] = a, b
            res = _score_box(samples, lower, upper)
            if max(res.probs) > 0:
                report.sets.append(res)
                break
        else:
            report.notes.append(f"set {k}: skipped after {max_retries} degenerate boxes")
    return report

"""Identifiability diagnostics over paired (true latent, learned latent) codes.

Learned codes are compared with the ground truth only through predictability:
"equal up to an injective map" becomes "one block predicts the other out of sample".
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import solve

from .kernels import gaussian_gram, hsic_permutation_test, median_width
from .models import GanBundle, NoiseDraw
from .numcore import as_mat, mlp_apply

SST_FLOOR = 1e-12


@dataclass
class CodeBatch:
    true_c: np.ndarray
    true_s: np.ndarray
    learned_c: np.ndarray
    learned_s: np.ndarray
    domain: np.ndarray

    def __post_init__(self):
        n = self.true_c.shape[0]
        for name in ("true_s", "learned_c", "learned_s", "domain"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")

    def to_csv(self, path: str | Path) -> None:
        cols = {"c": self.true_c, "s": self.true_s, "c_hat": self.learned_c, "s_hat": self.learned_s}
        header = ["domain"] + [f"{k}_{i}" for k, v in cols.items() for i in range(v.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in range(self.true_c.shape[0]):
                vals = [repr(float(v)) for blk in cols.values() for v in blk[r]]
                w.writerow([int(self.domain[r])] + vals)

    @classmethod
    def from_csv(cls, path: str | Path) -> "CodeBatch":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))

        def block(prefix):
            idx = [i for i, h in enumerate(header) if h.rsplit("_", 1)[0] == prefix]
            return body[:, idx]
        return cls(block("c"), block("s"), block("c_hat"), block("s_hat"), body[:, 0].astype(int))


# --- regressors ----------------------------------------------------------------------

def _split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 5]).permutation(n)
    n_train = int(round(0.8 * n))
    return perm[:n_train], perm[n_train:]


def _fit_predict_linear(A_tr, B_tr, A_te):
    X = np.hstack([A_tr, np.ones((len(A_tr), 1))])
    coef, *_ = np.linalg.lstsq(X, B_tr, rcond=None)
    return np.hstack([A_te, np.ones((len(A_te), 1))]) @ coef


def _fit_predict_kernel(A_tr, B_tr, A_te, sigma, ridge):
    mu, sd = A_tr.mean(0), A_tr.std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    A_tr, A_te = (A_tr - mu) / sd, (A_te - mu) / sd
    w = sigma if sigma is not None else median_width(A_tr)
    K = gaussian_gram(A_tr, A_tr, w)
    b_mu = B_tr.mean(0)
    alpha = solve(K + ridge * len(A_tr) * np.eye(len(A_tr)), B_tr - b_mu, assume_a="pos")
    return b_mu + gaussian_gram(A_te, A_tr, w) @ alpha


def r2_score(B: np.ndarray, pred: np.ndarray) -> float:
    """Mean over columns of 1 - SSE/SST (SST floored); zero-variance columns score
    1 when predicted exactly and 0 otherwise."""
    scores = []
    for j in range(B.shape[1]):
        sse = float(np.sum((B[:, j] - pred[:, j]) ** 2))
        sst = float(np.sum((B[:, j] - B[:, j].mean()) ** 2))
        if sst <= SST_FLOOR:
            scores.append(1.0 if sse <= SST_FLOOR else 0.0)
        else:
            scores.append(1.0 - sse / sst)
    return float(np.mean(scores))


def alignment_r2(A, B, regressor: str = "linear", sigma: float | None = None, ridge: float = 1e-3,
                 seed: int = 0) -> float:
    """Out-of-sample R^2 of predicting B from A (80/20 split), averaged over B's columns.

    ``regressor`` is "linear" (least squares with intercept) or "kernel" (Gaussian
    kernel ridge on standardized A; ``sigma=None`` uses the median heuristic and the
    ridge is scaled by the training-set size).
    """
    A, B = as_mat(A), as_mat(B)
    if A.shape[0] != B.shape[0]:
        raise ValueError("A and B must have the same number of rows")
    if A.shape[0] < 10:
        raise ValueError("alignment needs at least 10 rows")
    tr, te = _split(A.shape[0], seed)
    if regressor == "linear":
        pred = _fit_predict_linear(A[tr], B[tr], A[te])
    elif regressor == "kernel":
        pred = _fit_predict_kernel(A[tr], B[tr], A[te], sigma, ridge)
    else:
        raise ValueError(f"unknown regressor {regressor!r}")
    return r2_score(B[te], pred)


def leakage_scores(codes: CodeBatch, regressor: str = "kernel", seed: int = 0, **kw) -> tuple[float, float]:
    """(R^2 of true content from learned style, R^2 of true style from learned content)."""
    return (alignment_r2(codes.learned_s, codes.true_c, regressor, seed=seed, **kw),
            alignment_r2(codes.learned_c, codes.true_s, regressor, seed=seed, **kw))


def mean_abs_columns(codes) -> np.ndarray:
    codes = as_mat(codes)
    return np.abs(codes).mean(0) if codes.shape[0] else np.zeros(codes.shape[1])


def effective_dim(style_codes, tau_rel: float = 0.1) -> int:
    """Number of columns whose mean |value| exceeds tau_rel times the largest column mean."""
    if not 0 < tau_rel < 1:
        raise ValueError("tau_rel must lie in (0, 1)")
    m = mean_abs_columns(style_codes)
    if m.size == 0 or m.max() <= 0:
        return 0
    return int(np.sum(m > tau_rel * m.max()))


@dataclass
class InvarianceProbe:
    ratio: float
    n_used: int
    n_skipped: int
    degenerate: bool


def content_invariance_probe(encode_fn: Callable[[np.ndarray], np.ndarray], world, n_points: int = 50,
                             h: float = 1e-4, rng: np.random.Generator | None = None) -> InvarianceProbe:
    """Median over latent points of ||d c_hat / d s||_F / (||d c_hat / d c||_F + 1e-12),
    with central differences taken through the world's mixing map.

    ``encode_fn`` maps a batch of observations to content codes; all perturbed
    points are passed in one call.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    spec = world.spec
    D, d_c = spec.latent_dim, spec.d_c
    z = np.vstack([np.hstack([spec.content.sample(1, rng), spec.styles[k % spec.n_domains].sample(1, rng)])
                   for k in range(n_points)])
    eye = np.eye(D) * h
    pert = np.concatenate([z[:, None, :] + eye[None], z[:, None, :] - eye[None]], axis=1)  # (P, 2D, D)
    codes = as_mat(encode_fn(world.mixing.forward(pert.reshape(-1, D))))
    codes = codes.reshape(n_points, 2 * D, -1)
    ratios, skipped, degenerate = [], 0, 0
    for p in range(n_points):
        if not np.all(np.isfinite(codes[p])):
            skipped += 1
            continue
        jac = (codes[p, :D] - codes[p, D:]) / (2 * h)  # (D, d_c_hat): row j = derivative w.r.t. z_j
        num = np.linalg.norm(jac[d_c:])
        den = np.linalg.norm(jac[:d_c])
        if den < 1e-12:
            degenerate += 1
        ratios.append(num / (den + 1e-12))
    if n_points and skipped > n_points / 2:
        raise FloatingPointError(f"content encoder non-finite at {skipped}/{n_points} probe points")
    ratio = float(np.median(ratios)) if ratios else 0.0
    return InvarianceProbe(ratio, len(ratios), skipped, degenerate > len(ratios) / 2)


@dataclass
class ReportConfig:
    regressor: str = "kernel"
    ridge: float = 1e-3
    tau_rel: float = 0.1
    n_perm: int = 200
    hsic_rows: int = 500
    probe_points: int = 50
    probe_h: float = 1e-4
    seed: int = 0


@dataclass
class IdentReport:
    content_r2: float           # learned c -> true c
    content_r2_reverse: float   # true c -> learned c
    style_r2: float             # learned s -> true s
    style_r2_reverse: float
    leakage_c_from_s: float
    leakage_s_from_c: float
    effective_style_dim: int
    style_mean_abs: list[float]
    hsic_stat: float
    hsic_q95: float
    invariance_ratio: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def make_ident_report(codes: CodeBatch, encode_fn=None, world=None,
                      config: ReportConfig | None = None) -> IdentReport:
    cfg = config or ReportConfig()
    kw = dict(regressor=cfg.regressor, ridge=cfg.ridge, seed=cfg.seed)
    c_from_s, s_from_c = leakage_scores(codes, **kw)
    rows = min(cfg.hsic_rows, codes.learned_c.shape[0])
    idx = np.random.default_rng([cfg.seed, 3]).permutation(codes.learned_c.shape[0])[:rows]
    perm = hsic_permutation_test(codes.learned_c[idx], codes.learned_s[idx], cfg.n_perm,
                                 np.random.default_rng([cfg.seed, 4]))
    notes = []
    ratio = None
    if encode_fn is not None and world is not None:
        probe = content_invariance_probe(encode_fn, world, cfg.probe_points, cfg.probe_h,
                                         np.random.default_rng([cfg.seed, 6]))
        ratio = probe.ratio
        if probe.degenerate:
            notes.append("invariance probe: content Jacobian degenerate at most points")
    return IdentReport(
        content_r2=alignment_r2(codes.learned_c, codes.true_c, **kw),
        content_r2_reverse=alignment_r2(codes.true_c, codes.learned_c, **kw),
        style_r2=alignment_r2(codes.learned_s, codes.true_s, **kw),
        style_r2_reverse=alignment_r2(codes.true_s, codes.learned_s, **kw),
        leakage_c_from_s=c_from_s,
        leakage_s_from_c=s_from_c,
        effective_style_dim=effective_dim(codes.learned_s, cfg.tau_rel),
        style_mean_abs=mean_abs_columns(codes.learned_s).tolist(),
        hsic_stat=perm.statistic,
        hsic_q95=perm.quantile95,
        invariance_ratio=ratio,
        notes=notes,
    )


def diversity_score(bundle: GanBundle, n_contents: int, n_styles_per_content: int, n: int,
                    rng: np.random.Generator) -> float:
    """Mean pairwise Euclidean distance between generations that share a content
    code but differ in style noise, averaged over contents."""
    if n_contents < 2 or n_styles_per_content < 2:
        raise ValueError("counts must be at least 2")
    c = mlp_apply(bundle.e_c, rng.standard_normal((n_contents, bundle.d_c)))
    r_s = rng.standard_normal((n_contents * n_styles_per_content, bundle.d_s))
    s = mlp_apply(bundle.e_s[n], r_s)
    codes = np.hstack([np.repeat(c, n_styles_per_content, axis=0), s])
    x = mlp_apply(bundle.q, codes).reshape(n_contents, n_styles_per_content, -1)
    iu = np.triu_indices(n_styles_per_content, 1)
    per = [np.linalg.norm(xi[:, None] - xi[None], axis=-1)[iu].mean() for xi in x]
    return float(np.mean(per))

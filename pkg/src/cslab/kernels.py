"""Gaussian-kernel two-sample (MMD) and independence (HSIC) statistics with input gradients.

Kernel: k(x, y) = exp(-||x - y||^2 / (2 sigma^2)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .numcore import ShapeError, as_mat


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel; ``width=None`` selects the median heuristic."""
    width: float | None = None

    def __post_init__(self):
        if self.width is not None and not self.width > 0:
            raise ValueError("kernel width must be positive")

    def resolve(self, *samples: np.ndarray) -> float:
        return self.width if self.width is not None else median_width(*samples)


def median_width(*samples: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the concatenated samples (1.0 if degenerate)."""
    z = np.vstack([as_mat(s) for s in samples])
    if z.shape[0] > 1000:
        z = z[:: int(np.ceil(z.shape[0] / 1000))]
    if z.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(z)))
    return med if med > 1e-12 else 1.0


def sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def gaussian_gram(X: np.ndarray, Y: np.ndarray, width: float) -> np.ndarray:
    return np.exp(-sq_dists(X, Y) / (2.0 * width * width))


def _as_kernel(kernel) -> KernelSpec:
    if kernel is None:
        return KernelSpec()
    if isinstance(kernel, KernelSpec):
        return kernel
    return KernelSpec(float(kernel))


def mmd2_unbiased(X, Y, kernel: KernelSpec | float | None = None) -> float:
    """Unbiased U-statistic estimate of MMD^2 (diagonals excluded from the within-sample terms)."""
    X, Y = as_mat(X), as_mat(Y)
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ShapeError("MMD needs at least 2 rows per sample")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"column mismatch: {X.shape[1]} vs {Y.shape[1]}")
    w = _as_kernel(kernel).resolve(X, Y)
    m, n = X.shape[0], Y.shape[0]
    kxx = gaussian_gram(X, X, w)
    kyy = gaussian_gram(Y, Y, w)
    kxy = gaussian_gram(X, Y, w)
    return float((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
                 + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
                 - 2.0 * kxy.mean())


def _gram_grad(X: np.ndarray, Y: np.ndarray, K: np.ndarray, G: np.ndarray, width: float):
    # d/dX and d/dY of sum(G * K) where K = gram(X, Y)
    W = G * K / (width * width)
    gX = -(W.sum(1)[:, None] * X - W @ Y)
    gY = -(W.sum(0)[:, None] * Y - W.T @ X)
    return gX, gY


def mmd2_unbiased_grad(X, Y, width: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and gradients w.r.t. X and Y at a fixed kernel width."""
    X, Y = as_mat(X), as_mat(Y)
    m, n = X.shape[0], Y.shape[0]
    kxx = gaussian_gram(X, X, width)
    kyy = gaussian_gram(Y, Y, width)
    kxy = gaussian_gram(X, Y, width)
    gxx = (1.0 - np.eye(m)) / (m * (m - 1))
    gyy = (1.0 - np.eye(n)) / (n * (n - 1))
    gxy = np.full((m, n), -2.0 / (m * n))
    val = float((gxx * kxx).sum() + (gyy * kyy).sum() + (gxy * kxy).sum())
    a1, a2 = _gram_grad(X, X, kxx, gxx, width)
    b1, b2 = _gram_grad(Y, Y, kyy, gyy, width)
    c1, c2 = _gram_grad(X, Y, kxy, gxy, width)
    return val, a1 + a2 + c1, b1 + b2 + c2


def _centered(K: np.ndarray) -> np.ndarray:
    return K - K.mean(0, keepdims=True) - K.mean(1, keepdims=True) + K.mean()


def hsic_biased(X, Y, kernel_x: KernelSpec | float | None = None,
                kernel_y: KernelSpec | float | None = None) -> float:
    """Biased HSIC: trace(K H L H) / (m - 1)^2."""
    X, Y = as_mat(X), as_mat(Y)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"row mismatch: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 3:
        raise ShapeError("HSIC needs at least 3 rows")
    m = X.shape[0]
    K = gaussian_gram(X, X, _as_kernel(kernel_x).resolve(X))
    L = gaussian_gram(Y, Y, _as_kernel(kernel_y).resolve(Y))
    return max(float((_centered(K) * L).sum()) / (m - 1) ** 2, 0.0)


def hsic_biased_grad(X, Y, width_x: float, width_y: float) -> tuple[float, np.ndarray, np.ndarray]:
    X, Y = as_mat(X), as_mat(Y)
    m = X.shape[0]
    K = gaussian_gram(X, X, width_x)
    L = gaussian_gram(Y, Y, width_y)
    Kc, Lc = _centered(K), _centered(L)
    scale = 1.0 / (m - 1) ** 2
    val = float((Kc * L).sum()) * scale
    gx1, gx2 = _gram_grad(X, X, K, Lc * scale, width_x)
    gy1, gy2 = _gram_grad(Y, Y, L, Kc * scale, width_y)
    return val, gx1 + gx2, gy1 + gy2


@dataclass
class PermutationResult:
    statistic: float
    quantile95: float
    p_value: float

    @property
    def reject(self) -> bool:
        return self.statistic > self.quantile95


def hsic_permutation_test(X, Y, n_perm: int = 200, rng: np.random.Generator | None = None,
                          kernel_x=None, kernel_y=None) -> PermutationResult:
    """Permutation null for biased HSIC: shuffle the rows of Y against X."""
    X, Y = as_mat(X), as_mat(Y)
    rng = np.random.default_rng(0) if rng is None else rng
    m = X.shape[0]
    K = _centered(gaussian_gram(X, X, _as_kernel(kernel_x).resolve(X)))
    L = gaussian_gram(Y, Y, _as_kernel(kernel_y).resolve(Y))
    scale = 1.0 / (m - 1) ** 2
    stat = float((K * L).sum()) * scale
    null = np.empty(n_perm)
    for b in range(n_perm):
        idx = rng.permutation(m)
        null[b] = float((K * L[np.ix_(idx, idx)]).sum()) * scale
    return PermutationResult(max(stat, 0.0), float(np.quantile(null, 0.95)),
                             float((1 + np.sum(null >= stat)) / (n_perm + 1)))

"""GAN inversion by latent-code optimization, and the two translation modes.

Rows are inverted independently: the divergence is summed over rows, so batched
Adam is exactly per-row Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import GanBundle, NoiseDraw, generate
from .numcore import AdamState, adam_step, as_mat, mlp_apply, mlp_backward, mlp_forward


class InversionError(RuntimeError):
    pass


@dataclass
class InversionConfig:
    steps: int = 400
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    restarts: int = 3
    seed: int = 0
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass
class InversionResult:
    c: np.ndarray          # (rows, d_c_hat)
    s: np.ndarray          # (rows, d_s_hat)
    residual: np.ndarray   # (rows,) squared Euclidean distance ||q(c, s) - x||^2
    restart: np.ndarray    # (rows,) index of the chosen restart
    checkpoints: np.ndarray = field(default=None, repr=False)  # (n_checkpoints, rows) for the chosen restart

    def __len__(self) -> int:
        return self.c.shape[0]


def _init_codes(bundle: GanBundle, rows: int, restart: int, domain: int | None, rng) -> np.ndarray:
    noise = NoiseDraw.sample(rows, bundle.d_c, bundle.d_s, rng)
    n = domain if domain is not None else restart % bundle.n_domains
    return np.hstack([mlp_apply(bundle.e_c, noise.r_c), mlp_apply(bundle.e_s[n], noise.r_s)])


def _optimize(bundle: GanBundle, x: np.ndarray, z: np.ndarray, cfg: InversionConfig):
    # keeps the best iterate per row; checkpoints record the best residual so far
    st = AdamState.zeros_like([z], lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    checkpoints = []
    best_z, best_r = z.copy(), np.full(z.shape[0], np.inf)
    for t in range(cfg.steps + 1):
        out, tape = mlp_forward(bundle.q, z)
        diff = out - x
        resid = (diff * diff).sum(1)
        better = resid < best_r
        best_z[better], best_r[better] = z[better], resid[better]
        if t % cfg.checkpoint_every == 0 or t == cfg.steps:
            checkpoints.append(best_r.copy())
        if t == cfg.steps:
            break
        _, gz = mlp_backward(bundle.q, tape, 2.0 * diff)
        # non-finite rows are frozen and discarded by the caller
        gz = np.where(np.isfinite(gz), gz, 0.0)
        st, (z,) = adam_step(st, [z], [gz])
    return best_z, best_r, np.array(checkpoints)


def invert(bundle: GanBundle, x, config: InversionConfig | None = None,
           domain: int | None = None) -> InversionResult:
    """argmin over (c, s) of ||q(c, s) - x||^2, best of ``restarts`` Adam runs per row.

    Restart k starts from standard normal noise pushed through e_C and the style
    encoder of ``domain`` (or of domain ``k mod N`` when the domain is unknown).
    """
    cfg = config or InversionConfig()
    cfg.validate()
    x = as_mat(x)
    if x.shape[1] != bundle.data_dim:
        raise ValueError(f"observation has {x.shape[1]} coordinates, generator emits {bundle.data_dim}")
    rows = x.shape[0]
    rng = np.random.default_rng([cfg.seed, 31])
    best_z = np.zeros((rows, bundle.d_c + bundle.d_s))
    best_r = np.full(rows, np.inf)
    best_k = np.full(rows, -1)
    best_cp = None
    for k in range(cfg.restarts):
        z0 = _init_codes(bundle, rows, k, domain, rng)
        z, resid, cps = _optimize(bundle, x, z0, cfg)
        ok = np.isfinite(resid) & np.all(np.isfinite(z), axis=1)
        better = ok & (resid < best_r)
        best_z[better] = z[better]
        best_r[better] = resid[better]
        best_k[better] = k
        if best_cp is None:
            best_cp = np.full_like(cps, np.nan)
        best_cp[:, better] = cps[:, better]
    if rows and np.any(best_k < 0):
        raise InversionError(f"{int((best_k < 0).sum())} rows produced non-finite divergence in every restart")
    d_c = bundle.d_c
    return InversionResult(best_z[:, :d_c], best_z[:, d_c:], best_r, best_k, best_cp)


def _regenerate(bundle: GanBundle, c: np.ndarray, s: np.ndarray) -> np.ndarray:
    return mlp_apply(bundle.q, np.hstack([c, s]))


def translate_sampled(bundle: GanBundle, x_src, src: int, tgt: int, rng: np.random.Generator,
                      config: InversionConfig | None = None) -> np.ndarray:
    """q(c_hat(x_src), e_S[tgt](r)) with fresh r ~ N(0, I)."""
    for n in (src, tgt):
        if not 0 <= n < bundle.n_domains:
            raise IndexError(f"domain {n} out of range")
    inv = invert(bundle, x_src, config, domain=src)
    r = rng.standard_normal((len(inv), bundle.d_s))
    return _regenerate(bundle, inv.c, mlp_apply(bundle.e_s[tgt], r))


def translate_guided(bundle: GanBundle, x_src, src: int, x_ref, tgt: int,
                     config: InversionConfig | None = None) -> np.ndarray:
    """q(c_hat(x_src), s_hat(x_ref))."""
    for n in (src, tgt):
        if not 0 <= n < bundle.n_domains:
            raise IndexError(f"domain {n} out of range")
    c = invert(bundle, x_src, config, domain=src).c
    s = invert(bundle, x_ref, config, domain=tgt).s
    return _regenerate(bundle, c, s)

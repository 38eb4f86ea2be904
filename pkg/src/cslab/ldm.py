"""Direct latent distribution matching: an encoder f = (f_C, f_S) trained so that
content codes have the same distribution in every domain, content and style codes
are independent within a domain, f stays injective (via a decoder r), and style
codes are sparse.

Discrepancy terms use Gaussian kernels. Kernel widths resolved by the median
heuristic are recomputed on each batch and held fixed for the gradient.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields
from itertools import combinations
from typing import Sequence

import numpy as np

from .gan import (DIVERGENCE_LIMIT, Diverged, DomainSampler, _clamped, _disc_loss_grads,
                  sparsity_penalty, sparsity_penalty_grad)
from .kernels import hsic_biased_grad, median_width, mmd2_unbiased, mmd2_unbiased_grad
from .models import DEFAULT_HIDDEN, LdmBundle, encode_ldm, init_ldm_bundle
from .numcore import AdamState, NonFiniteError, adam_step, mlp_backward, mlp_forward

LOG4 = 2.0 * np.log(2.0)


@dataclass
class LdmTrainConfig:
    steps: int = 10000
    batch: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_dm: float = 1.0
    lam_indep: float = 1.0
    weight_recon: float = 1.0
    lam_sparse: float = 0.0
    p: float = 1.0
    dm: str = "mmd"              # "mmd" or "adversarial"
    critic_steps: int = 1
    lr_critic: float = 1e-3
    content_width: float | None = None
    style_width: float | None = None
    d_c_hat: int = 2
    d_s_hat: int = 2
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    seed: int = 0
    eval_every: int = 1000
    eval_samples: int = 500

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch < 3:
            raise ValueError("batch must be at least 3 (HSIC needs 3 rows)")
        if self.eval_every < 1 or self.critic_steps < 1:
            raise ValueError("eval_every and critic_steps must be positive")
        for name in ("weight_dm", "lam_indep", "weight_recon", "lam_sparse"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.lr > 0 and self.lr_critic > 0):
            raise ValueError("learning rates must be positive")
        if self.dm not in ("mmd", "adversarial"):
            raise ValueError("dm must be 'mmd' or 'adversarial'")
        if self.p not in (1.0, 0.5):
            raise ValueError("p must be 1 or 0.5")
        for name in ("content_width", "style_width"):
            w = getattr(self, name)
            if w is not None and not w > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LdmTrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown LDM config fields: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class LdmTraceRow:
    step: int
    total: float
    dm: float
    indep: float
    recon: float
    sparse: float
    content_mmd: float   # held-out mean pairwise MMD^2 of content codes
    wall_time: float = 0.0

    def csv_fields(self) -> dict:
        return {k: getattr(self, k) for k in ("step", "total", "dm", "indep", "recon", "sparse", "content_mmd")}


def _adv_dm_grad(critic, a: np.ndarray, b: np.ndarray):
    pa, ta = mlp_forward(critic, a)
    pb, tb = mlp_forward(critic, b)
    val = LOG4 - float(np.mean(-np.log(_clamped(pa))) + np.mean(-np.log(1.0 - _clamped(pb))))
    _, ga = mlp_backward(critic, ta, -(pa - 1.0) / len(a), wrt_logits=True)
    _, gb = mlp_backward(critic, tb, -pb / len(b), wrt_logits=True)
    return val, ga, gb


def _widths(cfg: LdmTrainConfig, contents, styles) -> tuple[float, list[float], list[float]]:
    wc = cfg.content_width if cfg.content_width is not None else median_width(*contents)
    wcs = [cfg.content_width or median_width(c) for c in contents]
    wss = [cfg.style_width or median_width(s) for s in styles]
    return wc, wcs, wss


def _objective(bundle: LdmBundle, batches: Sequence[np.ndarray], cfg: LdmTrainConfig, with_grad: bool):
    N = bundle.n_domains
    if len(batches) != N:
        raise ValueError(f"expected {N} domain batches, got {len(batches)}")
    d_c = bundle.d_c
    fwd = [mlp_forward(bundle.f, x) for x in batches]
    codes = [z for z, _ in fwd]
    contents = [z[:, :d_c] for z in codes]
    styles = [z[:, d_c:] for z in codes]
    grads_z = [np.zeros_like(z) for z in codes]
    comp = dict(dm=0.0, indep=0.0, recon=0.0, sparse=0.0)
    wc, wcs, wss = _widths(cfg, contents, styles)

    if cfg.weight_dm > 0:
        for i, j in combinations(range(N), 2):
            if cfg.dm == "mmd":
                v, gi, gj = mmd2_unbiased_grad(contents[i], contents[j], wc)
            else:
                v, gi, gj = _adv_dm_grad(bundle.critics[(i, j)], contents[i], contents[j])
            comp["dm"] += float(v)
            grads_z[i][:, :d_c] += cfg.weight_dm * gi
            grads_z[j][:, :d_c] += cfg.weight_dm * gj
    if cfg.lam_indep > 0:
        for n in range(N):
            v, gc, gs = hsic_biased_grad(contents[n], styles[n], wcs[n], wss[n])
            comp["indep"] += v
            grads_z[n][:, :d_c] += cfg.lam_indep * gc
            grads_z[n][:, d_c:] += cfg.lam_indep * gs
    grad_r = None
    if cfg.weight_recon > 0:
        for n in range(N):
            out, tr = mlp_forward(bundle.r, codes[n])
            diff = out - batches[n]
            comp["recon"] += float(np.mean(np.sum(diff * diff, axis=1)))
            if with_grad:
                gr, gz = mlp_backward(bundle.r, tr, cfg.weight_recon * 2.0 * diff / len(diff))
                grads_z[n] += gz
                grad_r = gr.arrays() if grad_r is None else [a + b for a, b in zip(grad_r, gr.arrays())]
    if cfg.lam_sparse > 0:
        for n in range(N):
            comp["sparse"] += sparsity_penalty(styles[n], cfg.p, 1.0)
            grads_z[n][:, d_c:] += sparsity_penalty_grad(styles[n], cfg.p, cfg.lam_sparse)

    for name, v in comp.items():
        if not np.isfinite(v):
            raise NonFiniteError(f"LDM objective term {name!r} is not finite")
    total = (cfg.weight_dm * comp["dm"] + cfg.lam_indep * comp["indep"]
             + cfg.weight_recon * comp["recon"] + cfg.lam_sparse * comp["sparse"])
    if not with_grad:
        return total, comp, None
    grad_f = None
    for (_, tape), g in zip(fwd, grads_z):
        gf, _ = mlp_backward(bundle.f, tape, g)
        grad_f = gf.arrays() if grad_f is None else [a + b for a, b in zip(grad_f, gf.arrays())]
    if grad_r is None:
        grad_r = [np.zeros_like(a) for a in bundle.r.arrays()]
    return total, comp, grad_f + grad_r


def ldm_objective(bundle: LdmBundle, batches: Sequence[np.ndarray], config: LdmTrainConfig) -> tuple[float, dict]:
    """Weighted sum of pairwise content discrepancy, per-domain content/style HSIC,
    reconstruction error and style sparsity; returns (total, unweighted components).

    The unbiased MMD^2 term can dip slightly below zero when the content codes already match.
    """
    total, comp, _ = _objective(bundle, batches, config, with_grad=False)
    return total, comp


def _held_out_content_mmd(bundle: LdmBundle, source: DomainSampler, cfg: LdmTrainConfig, step: int) -> float:
    rng = np.random.default_rng([cfg.seed, 99, step])
    contents = [encode_ldm(bundle, source.sample(n, cfg.eval_samples, rng))[0] for n in range(bundle.n_domains)]
    pairs = list(combinations(range(bundle.n_domains), 2))
    if not pairs:
        return 0.0
    w = cfg.content_width if cfg.content_width is not None else median_width(*contents)
    return float(np.mean([mmd2_unbiased(contents[i], contents[j], w) for i, j in pairs]))


def train_ldm(source: DomainSampler, config: LdmTrainConfig,
              bundle: LdmBundle | None = None, log=None) -> tuple[LdmBundle, list[LdmTraceRow]]:
    """Adam on encoder and decoder; with adversarial DM each step first runs
    ``critic_steps`` updates of the pairwise latent critics."""
    cfg = config
    cfg.validate()
    if bundle is None:
        bundle = init_ldm_bundle(source.data_dim, cfg.d_c_hat, cfg.d_s_hat, source.n_domains, cfg.hidden, cfg.seed)
    trace: list[LdmTraceRow] = []
    if cfg.steps == 0:
        return bundle, trace
    N = bundle.n_domains
    data_rng = np.random.default_rng([cfg.seed, 1])
    hyper = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    opt = AdamState.zeros_like(bundle.model_arrays(), lr=cfg.lr, **hyper)
    adversarial = cfg.dm == "adversarial" and cfg.weight_dm > 0 and N > 1
    opt_c = AdamState.zeros_like(bundle.critic_arrays(), lr=cfg.lr_critic, **hyper) if adversarial else None
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batches = [source.sample(n, cfg.batch, data_rng) for n in range(N)]
        if adversarial:
            for _ in range(cfg.critic_steps):
                contents = [encode_ldm(bundle, x)[0] for x in batches]
                grads = []
                for i, j in sorted(bundle.critics):
                    _, g = _disc_loss_grads(bundle.critics[(i, j)], contents[i], contents[j])
                    grads += g
                opt_c, new = adam_step(opt_c, bundle.critic_arrays(), grads)
                bundle = bundle.with_critic_arrays(new)
        try:
            total, comp, grads = _objective(bundle, batches, cfg, with_grad=True)
        except NonFiniteError as exc:
            raise Diverged(f"step {step}: {exc}", bundle, trace) from exc
        if abs(total) > DIVERGENCE_LIMIT:
            raise Diverged(f"LDM objective diverged at step {step} (value {total})", bundle, trace)
        opt, new = adam_step(opt, bundle.model_arrays(), grads)
        bundle = bundle.with_model_arrays(new)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row = LdmTraceRow(step, float(total), comp["dm"], comp["indep"], comp["recon"], comp["sparse"],
                              _held_out_content_mmd(bundle, source, cfg, step), time.perf_counter() - t0)
            trace.append(row)
            if log is not None:
                log(row, bundle)
    return bundle, trace

"""Sparsity-regularized multi-domain GAN: one logistic discriminator per domain,
a shared content encoder, per-domain style encoders and a shared generator."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import expit

from .kernels import KernelSpec, mmd2_unbiased
from .models import (DEFAULT_HIDDEN, GanBundle, NoiseDraw, gen_grad_arrays, generate,
                     generate_with_tape, generator_backward, init_gan_bundle)
from .numcore import AdamState, NonFiniteError, adam_step, mlp_backward, mlp_forward

PROB_CLAMP = 1e-7
SQRT_EPS = 1e-8
DIVERGENCE_LIMIT = 1e6


class Diverged(RuntimeError):
    """Training hit a non-finite or exploding loss; carries the partial result."""

    def __init__(self, message, bundle=None, trace=None):
        super().__init__(message)
        self.bundle = bundle
        self.trace = trace or []


class DomainSampler(Protocol):
    n_domains: int
    data_dim: int

    def sample(self, n: int, batch: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class GanTrainConfig:
    steps: int = 20000
    batch: int = 128
    lr_gen: float = 5e-4
    lr_disc: float = 5e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    lam: float = 0.3
    p: float = 1.0
    disc_steps_per_gen_step: int = 1
    seed: int = 0
    eval_every: int = 1000
    d_c_hat: int = 4
    d_s_hat: int = 4
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    encoder_hidden: tuple[int, ...] | None = None
    eval_samples: int = 500
    mmd_width: float | None = None

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch < 1 or self.eval_every < 1 or self.disc_steps_per_gen_step < 1:
            raise ValueError("batch, eval_every and disc_steps_per_gen_step must be positive")
        if not (self.lr_gen > 0 and self.lr_disc > 0):
            raise ValueError("learning rates must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.p not in (1.0, 0.5):
            raise ValueError("p must be 1 or 0.5")

    @classmethod
    def from_dict(cls, d: dict) -> "GanTrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GAN config fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("hidden", "encoder_hidden"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        if self.encoder_hidden is not None:
            d["encoder_hidden"] = list(self.encoder_hidden)
        return d


@dataclass
class TraceRow:
    step: int
    disc_loss: list[float]
    gen_loss: list[float]
    sparsity: float
    mmd_to_data: list[float]
    wall_time: float = 0.0

    def csv_fields(self) -> dict:
        row = {"step": self.step}
        for n, v in enumerate(self.disc_loss):
            row[f"disc_loss_{n}"] = v
        for n, v in enumerate(self.gen_loss):
            row[f"gen_loss_{n}"] = v
        row["sparsity"] = self.sparsity
        for n, v in enumerate(self.mmd_to_data):
            row[f"mmd_to_data_{n}"] = v
        return row


def write_trace_csv(path: str | Path, rows: Sequence, columns: Sequence[str] | None = None) -> None:
    """Deterministic CSV (wall time is kept out so reruns are byte-identical)."""
    dicts = [r.csv_fields() for r in rows]
    with open(path, "w", newline="") as fh:
        if columns is None:
            columns = list(dicts[0]) if dicts else ["step"]
        w = csv.writer(fh)
        w.writerow(columns)
        for d in dicts:
            w.writerow([repr(float(d[c])) if c != "step" else d[c] for c in columns])


# --- losses ------------------------------------------------------------------------

def _clamped(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _check_loss(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteError(f"{what} is not finite")
    return value


def disc_loss(bundle: GanBundle, real: np.ndarray, fake: np.ndarray, n: int) -> float:
    """mean[-log d(real)] + mean[-log(1 - d(fake))], probabilities clamped to [1e-7, 1 - 1e-7]."""
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("real and fake batches must be non-empty")
    pr = mlp_forward(bundle.disc[n], real)[0]
    pf = mlp_forward(bundle.disc[n], fake)[0]
    val = float(np.mean(-np.log(_clamped(pr))) + np.mean(-np.log(1.0 - _clamped(pf))))
    return _check_loss(val, f"discriminator {n} loss")


def _disc_loss_grads(disc, real: np.ndarray, fake: np.ndarray):
    pr, tr = mlp_forward(disc, real)
    pf, tf = mlp_forward(disc, fake)
    val = float(np.mean(-np.log(_clamped(pr))) + np.mean(-np.log(1.0 - _clamped(pf))))
    # logit-form gradients: d/dz[-log sig(z)] = sig(z) - 1, d/dz[-log(1 - sig(z))] = sig(z)
    gr, _ = mlp_backward(disc, tr, (pr - 1.0) / len(real), wrt_logits=True)
    gf, _ = mlp_backward(disc, tf, pf / len(fake), wrt_logits=True)
    return val, [a + b for a, b in zip(gr.arrays(), gf.arrays())]


def phi(t: np.ndarray, p: float) -> np.ndarray:
    if p == 1.0:
        return t
    if p == 0.5:
        return np.sqrt(t + SQRT_EPS)
    raise ValueError("p must be 1 or 0.5")


def sparsity_penalty(codes: np.ndarray, p: float = 1.0, lam: float = 0.3) -> float:
    """lam * batch-mean of sum_j phi_p(|code_j|)."""
    codes = np.atleast_2d(codes)
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if codes.shape[0] == 0:
        return 0.0
    return float(lam * np.mean(np.sum(phi(np.abs(codes), p), axis=1)))


def sparsity_penalty_grad(codes: np.ndarray, p: float, lam: float) -> np.ndarray:
    b = codes.shape[0]
    a = np.abs(codes)
    if p == 1.0:
        dphi = np.ones_like(a)
    else:
        dphi = 0.5 / np.sqrt(a + SQRT_EPS)
    return lam / b * dphi * np.sign(codes)


def gen_loss(bundle: GanBundle, noise: NoiseDraw, n: int, lam: float, p: float) -> float:
    """Non-saturating generator loss plus the style sparsity penalty for domain n."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if p not in (1.0, 0.5):
        raise ValueError("p must be 1 or 0.5")
    x, tape = generate_with_tape(bundle, noise, n)
    pf = mlp_forward(bundle.disc[n], x)[0]
    val = float(np.mean(-np.log(_clamped(pf)))) + sparsity_penalty(tape.s, p, lam)
    return _check_loss(val, f"generator {n} loss")


def _gen_loss_grads(bundle: GanBundle, noise: NoiseDraw, n: int, lam: float, p: float):
    x, tape = generate_with_tape(bundle, noise, n)
    pf, td = mlp_forward(bundle.disc[n], x)
    adv = float(np.mean(-np.log(_clamped(pf))))
    pen = sparsity_penalty(tape.s, p, lam)
    _, gx = mlp_backward(bundle.disc[n], td, (pf - 1.0) / len(x), wrt_logits=True)
    gs = sparsity_penalty_grad(tape.s, p, lam) if lam > 0 else None
    grads, _, _ = generator_backward(bundle, tape, gx, gs)
    return adv, pen, grads


# --- data sources ------------------------------------------------------------------

class WorldSource:
    """Observation-only view of a synthetic world: trainers never see latents."""

    def __init__(self, world):
        from .synthworld import sample_domain
        self._world = world
        self._sample = sample_domain
        self.n_domains = world.spec.n_domains
        self.data_dim = world.spec.ambient_dim

    def sample(self, n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
        return self._sample(self._world, n, batch, rng).x


class ArraySource:
    """Per-domain callables ``rng, batch -> x`` (used for 1-D toys and tests)."""

    def __init__(self, samplers: Sequence, data_dim: int):
        self._samplers = list(samplers)
        self.n_domains = len(self._samplers)
        self.data_dim = data_dim

    def sample(self, n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self._samplers[n](rng, batch), float).reshape(batch, self.data_dim)


# --- training ------------------------------------------------------------------------


def _eval_row(bundle: GanBundle, source: DomainSampler, cfg: GanTrainConfig, step: int,
              losses_d, losses_g, pen, t0) -> TraceRow:
    rng = np.random.default_rng([cfg.seed, 99, step])
    mmds = []
    for n in range(bundle.n_domains):
        real = source.sample(n, cfg.eval_samples, rng)
        fake = generate(bundle, NoiseDraw.sample(cfg.eval_samples, bundle.d_c, bundle.d_s, rng), n)
        mmds.append(mmd2_unbiased(fake, real, KernelSpec(cfg.mmd_width)))
    return TraceRow(step, list(map(float, losses_d)), list(map(float, losses_g)), float(pen), mmds,
                    time.perf_counter() - t0)


def train_gan(source: DomainSampler, config: GanTrainConfig, bundle: GanBundle | None = None,
              train_generator: bool = True, log=None) -> tuple[GanBundle, list[TraceRow]]:
    """Alternate ``disc_steps_per_gen_step`` discriminator Adam steps with one
    generator/encoder Adam step on the summed per-domain generator losses.

    Raises :class:`Diverged` (carrying the bundle and trace so far) when a loss
    exceeds 1e6 or turns non-finite.
    """
    cfg = config
    cfg.validate()
    if bundle is None:
        bundle = init_gan_bundle(source.data_dim, cfg.d_c_hat, cfg.d_s_hat, source.n_domains,
                                 cfg.hidden, cfg.seed, cfg.encoder_hidden)
    trace: list[TraceRow] = []
    if cfg.steps == 0:
        return bundle, trace
    N = bundle.n_domains
    data_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    hyper = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    opt_d = AdamState.zeros_like(bundle.disc_arrays(), lr=cfg.lr_disc, **hyper)
    opt_g = AdamState.zeros_like(bundle.gen_arrays(), lr=cfg.lr_gen, **hyper)
    t0 = time.perf_counter()
    last_d = [np.nan] * N
    last_g = [np.nan] * N
    last_pen = 0.0

    def guard(values, what, step):
        for v in values:
            if not np.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
                raise Diverged(f"{what} diverged at step {step} (value {v})", bundle, trace)

    for step in range(1, cfg.steps + 1):
        for _ in range(cfg.disc_steps_per_gen_step):
            grads = []
            for n in range(N):
                real = source.sample(n, cfg.batch, data_rng)
                fake = generate(bundle, NoiseDraw.sample(cfg.batch, bundle.d_c, bundle.d_s, noise_rng), n)
                last_d[n], g = _disc_loss_grads(bundle.disc[n], real, fake)
                grads += g
            guard(last_d, "discriminator loss", step)
            opt_d, new = adam_step(opt_d, bundle.disc_arrays(), grads)
            bundle = bundle.with_disc_arrays(new)
        if train_generator:
            per_domain = []
            last_pen = 0.0
            for n in range(N):
                noise = NoiseDraw.sample(cfg.batch, bundle.d_c, bundle.d_s, noise_rng)
                adv, pen, g = _gen_loss_grads(bundle, noise, n, cfg.lam, cfg.p)
                last_g[n] = adv + pen
                last_pen += pen
                per_domain.append(g)
            guard(last_g, "generator loss", step)
            opt_g, new = adam_step(opt_g, bundle.gen_arrays(), gen_grad_arrays(bundle, per_domain))
            bundle = bundle.with_gen_arrays(new)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            if not train_generator:
                eval_rng = np.random.default_rng([cfg.seed, 98, step])
                last_g = [gen_loss(bundle, NoiseDraw.sample(cfg.batch, bundle.d_c, bundle.d_s, eval_rng),
                                   n, cfg.lam, cfg.p) for n in range(N)]
            row = _eval_row(bundle, source, cfg, step, last_d, last_g, last_pen, t0)
            trace.append(row)
            if log is not None:
                log(row, bundle)
    return bundle, trace

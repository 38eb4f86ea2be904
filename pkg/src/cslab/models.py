"""Parameter bundles for the adversarial path (q, e_C, e_S[n], d[n]) and the
direct latent-matching path (encoder f, decoder r, pairwise latent critics)."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import (MlpParams, ShapeError, Tape, as_mat, load_networks, mlp, mlp_backward,
                      mlp_forward, save_networks)

DEFAULT_HIDDEN = (64, 64)


@dataclass
class NoiseDraw:
    r_c: np.ndarray
    r_s: np.ndarray

    @classmethod
    def sample(cls, batch: int, d_c: int, d_s: int, rng: np.random.Generator) -> "NoiseDraw":
        rc_rng, rs_rng = rng.spawn(2)
        return cls(rc_rng.standard_normal((batch, d_c)), rs_rng.standard_normal((batch, d_s)))

    def __len__(self) -> int:
        return self.r_c.shape[0]


@dataclass
class GanBundle:
    q: MlpParams
    e_c: MlpParams
    e_s: list[MlpParams]
    disc: list[MlpParams]

    @property
    def d_c(self) -> int:
        return self.e_c.output_dim

    @property
    def d_s(self) -> int:
        return self.e_s[0].output_dim

    @property
    def n_domains(self) -> int:
        return len(self.e_s)

    @property
    def data_dim(self) -> int:
        return self.q.output_dim

    def gen_arrays(self) -> list[np.ndarray]:
        out = self.q.arrays() + self.e_c.arrays()
        for e in self.e_s:
            out += e.arrays()
        return out

    def disc_arrays(self) -> list[np.ndarray]:
        return [a for d in self.disc for a in d.arrays()]

    def with_gen_arrays(self, arrays: Sequence[np.ndarray]) -> "GanBundle":
        arrays = list(arrays)
        k = len(self.q.arrays())
        q = self.q.with_arrays(arrays[:k])
        arrays = arrays[k:]
        k = len(self.e_c.arrays())
        e_c = self.e_c.with_arrays(arrays[:k])
        arrays = arrays[k:]
        e_s = []
        for e in self.e_s:
            k = len(e.arrays())
            e_s.append(e.with_arrays(arrays[:k]))
            arrays = arrays[k:]
        return GanBundle(q, e_c, e_s, self.disc)

    def with_disc_arrays(self, arrays: Sequence[np.ndarray]) -> "GanBundle":
        arrays = list(arrays)
        disc = []
        for d in self.disc:
            k = len(d.arrays())
            disc.append(d.with_arrays(arrays[:k]))
            arrays = arrays[k:]
        return GanBundle(self.q, self.e_c, self.e_s, disc)

    def networks(self) -> dict[str, MlpParams]:
        nets = {"q": self.q, "e_c": self.e_c}
        nets.update({f"e_s/{n}": e for n, e in enumerate(self.e_s)})
        nets.update({f"disc/{n}": d for n, d in enumerate(self.disc)})
        return nets

    def n_params(self) -> int:
        return sum(net.n_params() for net in self.networks().values())

    def save(self, stem: str | Path) -> None:
        save_networks(stem, self.networks(), {"kind": "gan", "d_c_hat": self.d_c, "d_s_hat": self.d_s,
                                              "n_domains": self.n_domains, "data_dim": self.data_dim})

    @classmethod
    def load(cls, stem: str | Path) -> "GanBundle":
        nets, meta = load_networks(stem)
        n = meta["n_domains"]
        return cls(nets["q"], nets["e_c"], [nets[f"e_s/{i}"] for i in range(n)],
                   [nets[f"disc/{i}"] for i in range(n)])


def init_gan_bundle(d: int, d_c: int, d_s: int, n_domains: int,
                    hidden: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0,
                    encoder_hidden: Sequence[int] | None = None) -> GanBundle:
    """``encoder_hidden`` sets e_C/e_S hidden sizes (defaults to ``hidden``; empty means linear)."""
    if d_c < 1 or d_s < 1 or d < 1 or n_domains < 1:
        raise ShapeError("dimensions and domain count must be positive")
    rng = np.random.default_rng([seed, 11])
    hidden = list(hidden)
    enc = hidden if encoder_hidden is None else list(encoder_hidden)
    q = mlp([d_c + d_s, *hidden, d], rng)
    e_c = mlp([d_c, *enc, d_c], rng)
    e_s = [mlp([d_s, *enc, d_s], rng) for _ in range(n_domains)]
    disc = [mlp([d, *hidden, 1], rng, head="sigmoid") for _ in range(n_domains)]
    return GanBundle(q, e_c, e_s, disc)


def gan_param_count(d: int, d_c: int, d_s: int, n_domains: int, hidden: Sequence[int]) -> int:
    def count(sizes):
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    hidden = list(hidden)
    return (count([d_c + d_s, *hidden, d]) + count([d_c, *hidden, d_c])
            + n_domains * (count([d_s, *hidden, d_s]) + count([d, *hidden, 1])))


def _check_domain(bundle, n: int) -> None:
    if not 0 <= n < bundle.n_domains:
        raise IndexError(f"domain {n} out of range for {bundle.n_domains} domains")


@dataclass
class GenTape:
    n: int
    c: np.ndarray
    s: np.ndarray
    tape_c: Tape
    tape_s: Tape
    tape_q: Tape


def generate_with_tape(bundle: GanBundle, noise: NoiseDraw, n: int) -> tuple[np.ndarray, GenTape]:
    _check_domain(bundle, n)
    c, tc = mlp_forward(bundle.e_c, noise.r_c)
    s, ts = mlp_forward(bundle.e_s[n], noise.r_s)
    x, tq = mlp_forward(bundle.q, np.hstack([c, s]))
    return x, GenTape(n, c, s, tc, ts, tq)


def generate(bundle: GanBundle, noise: NoiseDraw, n: int) -> np.ndarray:
    """x_hat = q(e_C(r_C), e_S[n](r_S))."""
    return generate_with_tape(bundle, noise, n)[0]


def generator_backward(bundle: GanBundle, tape: GenTape, grad_x: np.ndarray,
                       grad_s: np.ndarray | None = None) -> tuple[dict, np.ndarray, np.ndarray]:
    """Backprop ``grad_x`` (and an optional extra gradient on the style codes) through q, e_C, e_S[n].

    Returns per-network gradient MlpParams keyed "q", "e_c", "e_s", and the
    gradients w.r.t. the noise inputs r_C, r_S."""
    gq, gcode = mlp_backward(bundle.q, tape.tape_q, grad_x)
    d_c = bundle.d_c
    gc, gs = gcode[:, :d_c], gcode[:, d_c:]
    if grad_s is not None:
        gs = gs + grad_s
    gec, grc = mlp_backward(bundle.e_c, tape.tape_c, gc)
    ges, grs = mlp_backward(bundle.e_s[tape.n], tape.tape_s, gs)
    return {"q": gq, "e_c": gec, "e_s": ges}, grc, grs


def gen_grad_arrays(bundle: GanBundle, per_domain: list[dict | None]) -> list[np.ndarray]:
    """Sum per-domain generator gradients into the layout of ``GanBundle.gen_arrays``."""
    gq = [np.zeros_like(a) for a in bundle.q.arrays()]
    gc = [np.zeros_like(a) for a in bundle.e_c.arrays()]
    gs = [[np.zeros_like(a) for a in e.arrays()] for e in bundle.e_s]
    for n, g in enumerate(per_domain):
        if g is None:
            continue
        for acc, a in zip(gq, g["q"].arrays()):
            acc += a
        for acc, a in zip(gc, g["e_c"].arrays()):
            acc += a
        for acc, a in zip(gs[n], g["e_s"].arrays()):
            acc += a
    return gq + gc + [a for blk in gs for a in blk]


# --- direct latent-distribution-matching path ---------------------------------------

@dataclass
class LdmBundle:
    f: MlpParams
    r: MlpParams
    critics: dict[tuple[int, int], MlpParams]
    d_c: int
    d_s: int
    n_domains: int

    def __post_init__(self):
        if self.f.output_dim != self.d_c + self.d_s:
            raise ShapeError("encoder output must have d_c + d_s coordinates")

    @property
    def data_dim(self) -> int:
        return self.f.input_dim

    def model_arrays(self) -> list[np.ndarray]:
        return self.f.arrays() + self.r.arrays()

    def with_model_arrays(self, arrays: Sequence[np.ndarray]) -> "LdmBundle":
        k = len(self.f.arrays())
        return LdmBundle(self.f.with_arrays(arrays[:k]), self.r.with_arrays(arrays[k:]), self.critics,
                         self.d_c, self.d_s, self.n_domains)

    def critic_arrays(self) -> list[np.ndarray]:
        return [a for key in sorted(self.critics) for a in self.critics[key].arrays()]

    def with_critic_arrays(self, arrays: Sequence[np.ndarray]) -> "LdmBundle":
        arrays = list(arrays)
        critics = {}
        for key in sorted(self.critics):
            k = len(self.critics[key].arrays())
            critics[key] = self.critics[key].with_arrays(arrays[:k])
            arrays = arrays[k:]
        return LdmBundle(self.f, self.r, critics, self.d_c, self.d_s, self.n_domains)

    def networks(self) -> dict[str, MlpParams]:
        nets = {"f": self.f, "r": self.r}
        nets.update({f"critic/{i}-{j}": c for (i, j), c in sorted(self.critics.items())})
        return nets

    def save(self, stem: str | Path) -> None:
        save_networks(stem, self.networks(), {"kind": "ldm", "d_c_hat": self.d_c, "d_s_hat": self.d_s,
                                              "n_domains": self.n_domains, "data_dim": self.data_dim})

    @classmethod
    def load(cls, stem: str | Path) -> "LdmBundle":
        nets, meta = load_networks(stem)
        critics = {}
        for name, net in nets.items():
            if name.startswith("critic/"):
                i, j = name.split("/")[1].split("-")
                critics[(int(i), int(j))] = net
        return cls(nets["f"], nets["r"], critics, meta["d_c_hat"], meta["d_s_hat"], meta["n_domains"])


def init_ldm_bundle(d: int, d_c: int, d_s: int, n_domains: int,
                    hidden: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0) -> LdmBundle:
    if d_c < 1 or d_s < 1:
        raise ShapeError("d_c and d_s must be positive")
    rng = np.random.default_rng([seed, 13])
    hidden = list(hidden)
    f = mlp([d, *hidden, d_c + d_s], rng)
    r = mlp([d_c + d_s, *hidden, d], rng)
    critics = {pair: mlp([d_c, *hidden, 1], rng, head="sigmoid")
               for pair in combinations(range(n_domains), 2)}
    return LdmBundle(f, r, critics, d_c, d_s, n_domains)


def encode_ldm(bundle: LdmBundle, x) -> tuple[np.ndarray, np.ndarray]:
    """Split the encoder output positionally into (content, style) heads."""
    x = as_mat(x)
    if x.shape[1] != bundle.data_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, encoder expects {bundle.data_dim}")
    out, _ = mlp_forward(bundle.f, x)
    return out[:, :bundle.d_c], out[:, bundle.d_c:]

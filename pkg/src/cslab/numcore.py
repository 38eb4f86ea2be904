"""Dense numerical kernels: small MLPs with tape-based reverse mode, Adam, finite differences.

Batches are 2-D float64 arrays with one sample per row. A layer computes
``act(x @ W + b)`` with ``W`` shaped ``(in, out)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

LEAKY_SLOPE = 0.2
ACTIVATIONS = ("leaky_relu", "tanh", "softplus", "identity", "sigmoid")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_mat(x) -> np.ndarray:
    """Coerce to a 2-D float64 array (a 1-D input becomes a single row)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with shape {a.shape}")
    return a


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    if kind == "identity":
        return z
    if kind == "sigmoid":
        return expit(z)
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(kind: str, z: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    # g is dL/dy; returns dL/dz
    if kind == "leaky_relu":
        return np.where(z > 0, g, LEAKY_SLOPE * g)
    if kind == "tanh":
        return g * (1.0 - y * y)
    if kind == "softplus":
        return g * expit(z)
    if kind == "identity":
        return g
    if kind == "sigmoid":
        return g * y * (1.0 - y)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1].weight.shape[1], self.layers[i].weight.shape[0]
            if prev != cur:
                raise ShapeError(f"layer {i} expects {cur} inputs but layer {i - 1} emits {prev}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [l.weight.shape[1] for l in self.layers]

    @property
    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        layers = []
        for i, l in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != l.weight.shape or b.shape != l.bias.shape:
                raise ShapeError(f"layer {i}: array shapes {w.shape}/{b.shape} do not match")
            layers.append(Layer(w, b, l.activation))
        return MlpParams(layers)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> MlpParams:
    """Fan-in scaled uniform weights, zero biases."""
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(n_in)
        layers.append(Layer(rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out), act))
    return MlpParams(layers)


def mlp(sizes: Sequence[int], rng: np.random.Generator, hidden: str = "leaky_relu",
        head: str = "identity") -> MlpParams:
    """Shorthand for the usual hidden-activation plus head-activation stack."""
    acts = [hidden] * (len(sizes) - 2) + [head]
    return init_mlp(sizes, acts, rng)


def identity_mlp(dim: int) -> MlpParams:
    return MlpParams([Layer(np.eye(dim), np.zeros(dim), "identity")])


@dataclass
class Tape:
    """Activation cache from one forward pass."""
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    outputs: list[np.ndarray]


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, Tape]:
    x = as_mat(x)
    if x.shape[1] != params.input_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, network expects {params.input_dim}")
    inputs, pre, outputs = [], [], []
    h = x
    for l in params.layers:
        inputs.append(h)
        z = h @ l.weight + l.bias
        h = _activate(l.activation, z)
        pre.append(z)
        outputs.append(h)
    return h, Tape(inputs, pre, outputs)


def mlp_apply(params: MlpParams, x) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mlp_backward(params: MlpParams, tape: Tape, upstream,
                 wrt_logits: bool = False) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters (as an MlpParams) and input.

    With ``wrt_logits`` the upstream gradient refers to the last layer's
    pre-activation, which lets sigmoid heads use the stable logit form.
    """
    g = as_mat(upstream)
    if len(tape.outputs) != len(params.layers) or g.shape != tape.outputs[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match the tape "
                         f"({tape.outputs[-1].shape if tape.outputs else None})")
    grads: list[Layer] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        l = params.layers[i]
        if tape.inputs[i].shape[1] != l.weight.shape[0]:
            raise ShapeError(f"stale tape at layer {i}")
        if wrt_logits and i == len(params.layers) - 1:
            gz = g
        else:
            gz = _activation_grad(l.activation, tape.pre[i], tape.outputs[i], g)
        grads[i] = Layer(tape.inputs[i].T @ gz, gz.sum(axis=0), l.activation)
        g = gz @ l.weight.T
    return MlpParams(grads), g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              names: Sequence[str] | None = None) -> tuple[AdamState, list[np.ndarray]]:
    """One bias-corrected Adam update. Returns new state and new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and accumulator lists differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            where = names[i] if names else f"array {i} (layer {i // 2})"
            raise NonFiniteError(f"non-finite gradient in {where}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return AdamState(new_m, new_v, state.lr, b1, b2, state.eps, t), new_p


def finite_diff_jacobian(fn: Callable[[np.ndarray], np.ndarray], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian, shaped (outputs, inputs)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x0 = np.asarray(point, dtype=np.float64).ravel()
    cols = []
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = h
        fp = np.asarray(fn(x0 + e), dtype=np.float64).ravel()
        fm = np.asarray(fn(x0 - e), dtype=np.float64).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteError(f"function is non-finite near coordinate {j}")
        cols.append((fp - fm) / (2.0 * h))
    if not cols:
        return np.zeros((np.asarray(fn(x0)).size, 0))
    return np.stack(cols, axis=1)


# --- serialization -------------------------------------------------------------
#
# JSON form: {"sizes": [...], "activations": [...], "layers": [{"weight": [[...]], "bias": [...]}]}
# Binary form: model.bin holds every array as little-endian float64, row-major, in
# manifest order; model.json lists each network's sizes, activations and byte offset.

def mlp_to_dict(params: MlpParams) -> dict:
    return {
        "sizes": params.sizes,
        "activations": params.activations,
        "layers": [{"weight": l.weight.tolist(), "bias": l.bias.tolist()} for l in params.layers],
    }


def mlp_from_dict(d: dict) -> MlpParams:
    layers = []
    for spec, act in zip(d["layers"], d["activations"]):
        w = np.asarray(spec["weight"], dtype=np.float64)
        b = np.asarray(spec["bias"], dtype=np.float64)
        layers.append(Layer(w, b, act))
    params = MlpParams(layers)
    if params.sizes != list(d["sizes"]):
        raise ShapeError("layer sizes in document disagree with weights")
    return params


def save_networks(stem: str | Path, nets: dict[str, MlpParams], meta: dict | None = None) -> None:
    """Write ``<stem>.bin`` and ``<stem>.json``."""
    stem = Path(stem)
    manifest = {"format": "cslab-mlp-v1", "dtype": "<f8", "networks": [], "meta": meta or {}}
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, net in nets.items():
            manifest["networks"].append({
                "name": name, "sizes": net.sizes, "activations": net.activations, "offset": offset,
            })
            for a in net.arrays():
                buf = np.ascontiguousarray(a, dtype="<f8").tobytes()
                fh.write(buf)
                offset += len(buf)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_networks(stem: str | Path) -> tuple[dict[str, MlpParams], dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    nets = {}
    for entry in manifest["networks"]:
        sizes, acts = entry["sizes"], entry["activations"]
        pos = entry["offset"]
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], acts):
            w = np.frombuffer(raw, "<f8", n_in * n_out, pos).reshape(n_in, n_out).astype(np.float64)
            pos += 8 * n_in * n_out
            b = np.frombuffer(raw, "<f8", n_out, pos).astype(np.float64)
            pos += 8 * n_out
            layers.append(Layer(w, b, act))
        nets[entry["name"]] = MlpParams(layers)
    return nets, manifest.get("meta", {})

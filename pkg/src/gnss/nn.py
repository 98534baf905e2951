"""Differentiable building blocks in float64 numpy.

Every forward pass returns its output together with a tape; passing the
tape and an upstream gradient to the matching ``backward`` yields exact
reverse-mode gradients for the parameters and the input.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)

LN_EPS = 1e-5
EMBEDDING_DIM = 16


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    output_norm: bool = False

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if not self.hidden_dims or any(int(d) < 1 for d in dims):
            raise ShapeError(f"invalid MLP dims {dims}")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_scale: np.ndarray | None = None
    ln_shift: np.ndarray | None = None

    def named(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"W{i}", w), (f"b{i}", b)]
        if self.spec.output_norm:
            out += [("ln_scale", self.ln_scale), ("ln_shift", self.ln_shift)]
        return out

    def size(self) -> int:
        return sum(a.size for _, a in self.named())


def mlp_init(spec: MlpSpec, seed) -> MlpParams:
    """He-uniform weights (variance ``2 / fan_in``), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    scale = shift = None
    if spec.output_norm:
        scale = np.ones(spec.output_dim)
        shift = np.zeros(spec.output_dim)
    return MlpParams(spec, weights, biases, scale, shift)


@dataclass
class Tape:
    params: MlpParams
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    ln: tuple | None = None
    squeeze: bool = False
    out: np.ndarray | None = None


def mlp_forward(params: MlpParams, x: np.ndarray, check_finite: bool = True):
    """Evaluate the MLP on a vector or a row batch. Returns ``(y, tape)``."""
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"MLP expects (*, {spec.input_dim}) input, got {x.shape}")
    if check_finite and not np.isfinite(x).all():
        raise ValueError("non-finite MLP input")
    tape = Tape(params, squeeze=squeeze)
    _run_layers(params, tape, x, None)
    return _finish(params, tape)


def mlp_forward_preactivated(params: MlpParams, z0: np.ndarray):
    """Evaluate the MLP given the first layer's pre-activation ``x @ W0 + b0``.

    Lets callers assemble the first layer from pieces (for instance
    per-node products gathered onto edges). ``backward`` on the resulting
    tape leaves ``W0`` to the caller and returns the gradient w.r.t. ``z0``.
    """
    if z0.ndim != 2 or z0.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"first pre-activation must be (*, {params.weights[0].shape[1]}), got {z0.shape}")
    tape = Tape(params)
    _run_layers(params, tape, None, z0)
    return _finish(params, tape)


def _run_layers(params: MlpParams, tape: Tape, x, z0) -> None:
    h = x
    last = len(params.weights) - 1
    relu = params.spec.activation == "relu"
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        z = z0 if (i == 0 and z0 is not None) else h @ w + b
        tape.pre.append(z)
        h = np.maximum(z, 0.0) if (i < last and relu) else z
    tape.out = h


def _finish(params: MlpParams, tape: Tape):
    h = tape.out
    tape.out = None
    if params.spec.output_norm:
        mu = h.mean(axis=1, keepdims=True)
        xc = h - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        tape.ln = (xhat, inv)
        h = xhat * params.ln_scale + params.ln_shift
    return (h[0] if tape.squeeze else h), tape


def backward(tape: Tape, upstream: np.ndarray):
    """Reverse pass through a recorded MLP evaluation.

    Returns ``(grads, grad_input)`` where ``grads`` maps the names of
    ``MlpParams.named()`` to arrays of matching shape.
    """
    params, spec = tape.params, tape.params.spec
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeeze:
        g = g[None]
    rows = tape.pre[0].shape[0]
    if g.shape != (rows, spec.output_dim):
        raise ShapeError(f"upstream gradient shape {g.shape} != {(rows, spec.output_dim)}")
    grads = {}
    if spec.output_norm:
        xhat, inv = tape.ln
        grads["ln_scale"] = np.einsum("ij,ij->j", g, xhat)
        grads["ln_shift"] = g.sum(axis=0)
        gx = g * params.ln_scale
        d = gx.shape[1]
        g = inv / d * (d * gx - gx.sum(axis=1, keepdims=True) - xhat * np.einsum("ij,ij->i", gx, xhat)[:, None])
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i < last and spec.activation == "relu":
            g = g * (tape.pre[i] > 0)
        grads[f"b{i}"] = g.sum(axis=0)
        if tape.inputs[i] is None:
            # pre-activated first layer: W0 belongs to the caller, g is d/dz0
            break
        grads[f"W{i}"] = tape.inputs[i].T @ g
        g = g @ params.weights[i].T
    return grads, (g[0] if tape.squeeze else g)


def embedding_init(num_types: int, seed, dim: int = EMBEDDING_DIM) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=(num_types, dim))


def embedding_lookup(table: np.ndarray, type_id):
    """Rows of the embedding table for one id or an array of ids."""
    ids = np.asarray(type_id)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"type id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(table_shape, type_id, upstream) -> np.ndarray:
    """Gradient of the table: upstream rows accumulated onto their ids."""
    ids = np.atleast_1d(np.asarray(type_id))
    g = np.asarray(upstream).reshape(ids.size, table_shape[1])
    out = np.zeros(table_shape)
    np.add.at(out, ids, g)
    return out


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> bool:
    """In-place bias-corrected Adam update of ``params``.

    Skips the step (and leaves the counter unchanged) if any gradient is
    non-finite; returns whether the update was applied.
    """
    if params.keys() != grads.keys():
        raise ShapeError("parameter and gradient names differ")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.isfinite(g).all():
            log.warning("non-finite gradient in %s; optimizer step %d skipped", k, state.step)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def exponential_lr(step: int, total: int, lr0: float, lr_final: float) -> float:
    """Learning rate decayed geometrically from ``lr0`` to ``lr_final`` over ``total`` steps."""
    if total <= 1:
        return lr0
    return lr0 * (lr_final / lr0) ** (min(step, total) / total)

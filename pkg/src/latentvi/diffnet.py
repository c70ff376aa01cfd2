"""Multilayer perceptrons with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector. Each layer stores its weight
matrix ``(fan_out, fan_in)`` row-major followed by its bias. Gradients are
produced by a layer-wise backward pass over a recorded forward trace and
cover both the parameters and the network input, since the
reparameterization estimators need the latter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .numkit import RngStream

ACTIVATIONS = ("tanh", "softplus")
LOGVAR_CLAMP = (-10.0, 10.0)


@dataclass(frozen=True)
class MlpSpec:
    """Topology of a fully connected network.

    ``activation`` applies to hidden layers; the output layer is linear.
    ``heads`` optionally splits the output into named contiguous blocks,
    e.g. ``(k, k)`` for a (mean, log-variance) encoder.
    """

    layer_sizes: tuple
    activation: str = "tanh"
    heads: tuple | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise DomainError("an MLP needs at least one layer of positive width")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"activation must be one of {ACTIVATIONS}")
        if self.heads is not None:
            heads = tuple(int(h) for h in self.heads)
            object.__setattr__(self, "heads", heads)
            if sum(heads) != sizes[-1]:
                raise DomainError("head sizes must sum to the output size")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum((s[i] + 1) * s[i + 1] for i in range(len(s) - 1))

    def layer_slices(self):
        """(weight slice, bias slice, fan_in, fan_out) for each layer."""
        out = []
        pos = 0
        s = self.layer_sizes
        for i in range(len(s) - 1):
            fi, fo = s[i], s[i + 1]
            w = slice(pos, pos + fi * fo)
            pos += fi * fo
            b = slice(pos, pos + fo)
            pos += fo
            out.append((w, b, fi, fo))
        return out

    def split_heads(self, out: np.ndarray) -> list[np.ndarray]:
        if self.heads is None:
            return [out]
        idx = np.cumsum(self.heads)[:-1]
        return np.split(out, idx, axis=-1)

    def describe(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "heads": None if self.heads is None else list(self.heads),
        }


@dataclass
class MlpParams:
    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise DimensionError(
                f"expected {self.spec.n_params} parameters, got {self.flat.shape}"
            )

    def layers(self):
        for w, b, fi, fo in self.spec.layer_slices():
            yield self.flat[w].reshape(fo, fi), self.flat[b]


def init_params(spec: MlpSpec, rng: RngStream) -> MlpParams:
    flat = np.zeros(spec.n_params)
    for w, _b, fi, fo in spec.layer_slices():
        flat[w] = rng.normal(fi * fo) * np.sqrt(2.0 / (fi + fo))
    return MlpParams(spec, flat)


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    return np.logaddexp(0.0, a)


def _act_deriv(name, a, h):
    if name == "tanh":
        return 1.0 - h * h
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _as_batch(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.spec.n_in:
        raise DimensionError(f"input must have trailing size {params.spec.n_in}, got {x.shape}")
    return xb, single


def _forward_trace(params: MlpParams, xb: np.ndarray):
    acts = [xb]
    pre = []
    layers = list(params.layers())
    h = xb
    for i, (w, b) in enumerate(layers):
        a = h @ w.T + b
        pre.append(a)
        h = a if i == len(layers) - 1 else _act(params.spec.activation, a)
        acts.append(h)
    return acts, pre


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Forward pass on one input vector or a ``(batch, n_in)`` array."""
    xb, single = _as_batch(params, x)
    acts, _ = _forward_trace(params, xb)
    return acts[-1][0] if single else acts[-1]


def _backward(params: MlpParams, acts, pre, cb):
    layers = list(params.layers())
    slices = params.spec.layer_slices()
    grad = np.zeros_like(params.flat)
    g = cb
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        ws, bs, _, _ = slices[i]
        grad[ws] = (g.T @ acts[i]).ravel()
        grad[bs] = g.sum(axis=0)
        g = g @ w
        if i > 0:
            g = g * _act_deriv(params.spec.activation, pre[i - 1], acts[i])
    return grad, g


def mlp_grad(params: MlpParams, x, cotangent):
    """Vector-Jacobian products for parameters and input.

    For batched input the parameter gradient is summed over the batch;
    the input gradient keeps the batch axis.
    """
    xb, single = _as_batch(params, x)
    cot = np.asarray(cotangent, dtype=np.float64)
    cb = cot[None, :] if cot.ndim == 1 else cot
    if cb.shape != (xb.shape[0], params.spec.n_out):
        raise DimensionError(f"cotangent must have shape {(xb.shape[0], params.spec.n_out)}")
    acts, pre = _forward_trace(params, xb)
    grad, g = _backward(params, acts, pre, cb)
    return grad, (g[0] if single else g)


def forward_and_grad(params: MlpParams, x, cotangent_fn):
    """One forward pass plus a backward pass whose cotangent depends on the output.

    ``cotangent_fn`` maps the ``(batch, n_out)`` output to a cotangent of the
    same shape. Saves a second forward evaluation inside training loops.
    Input must be batched.
    """
    xb, _ = _as_batch(params, x)
    acts, pre = _forward_trace(params, xb)
    out = acts[-1]
    cb = np.asarray(cotangent_fn(out), dtype=np.float64)
    if cb.shape != out.shape:
        raise DimensionError("cotangent must match the output shape")
    grad, g = _backward(params, acts, pre, cb)
    return out, grad, g


def clamp_logvar(raw: np.ndarray):
    """Clamp a log-variance head; returns (clamped, mask of unclamped entries)."""
    lo, hi = LOGVAR_CLAMP
    clamped = np.clip(raw, lo, hi)
    return clamped, (raw > lo) & (raw < hi)

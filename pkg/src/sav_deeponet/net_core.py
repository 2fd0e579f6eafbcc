"""Small feedforward-network engine with exact parameter Jacobians.

Parameters live in one flat float64 vector.  Layout, layer by layer:
the weight matrix of shape ``(w_out, w_in)`` in row-major order, then the
bias vector of length ``w_out``.  Hidden layers use ``tanh``; the last
layer is affine.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ParamVector = np.ndarray

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def slices(self):
        """Yield ``(w_in, w_out, weight_slice, bias_slice)`` per layer."""
        off = 0
        for w_in, w_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            ws = slice(off, off + w_in * w_out)
            off += w_in * w_out
            bs = slice(off, off + w_out)
            off += w_out
            yield w_in, w_out, ws, bs

    def header(self) -> str:
        return f"mlp {','.join(map(str, self.layer_widths))} {self.activation}"

    @classmethod
    def from_header(cls, line: str) -> "MlpSpec":
        tag, widths, act = line.strip().lstrip("#").split()
        if tag != "mlp":
            raise ValueError(f"not an MLP header: {line!r}")
        return cls(tuple(int(w) for w in widths.split(",")), act)


def check_params(spec: MlpSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise ValueError("parameter vector contains non-finite entries")
    return params


def unpack(spec: MlpSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` into ``params`` for each layer."""
    params = np.asarray(params, dtype=np.float64)
    return [(params[ws].reshape(w_out, w_in), params[bs]) for w_in, w_out, ws, bs in spec.slices()]


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    out = np.zeros(spec.n_params)
    for w_in, w_out, ws, _ in spec.slices():
        bound = np.sqrt(6.0 / (w_in + w_out))
        out[ws] = rng.uniform(-bound, bound, size=w_in * w_out)
    return out


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"input must have trailing dimension {spec.n_in}, got shape {x.shape}")
    return x, single


def _forward_cache(spec, params, x):
    layers = unpack(spec, params)
    acts = [x]
    slopes = []
    a = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if i < last and spec.activation == "tanh":
            a = np.tanh(z)
            slopes.append(1.0 - a * a)
        else:
            a = z
            slopes.append(None)
        acts.append(a)
    return layers, acts, slopes


def forward(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    """Evaluate the network at one input (1-D) or a batch (rows)."""
    x, single = _as_batch(spec, x)
    _, acts, _ = _forward_cache(spec, params, x)
    return acts[-1][0] if single else acts[-1]


def _reverse(spec, layers, acts, slopes, seed):
    # seed: (batch, q, n_out); returns per-layer (gW, gb) with leading (batch, q)
    grads = []
    D = seed
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_prev = acts[i]
        gW = D[:, :, :, None] * a_prev[:, None, None, :]
        grads.append((gW, D))
        if i > 0:
            D = D @ W
            if slopes[i - 1] is not None:
                D = D * slopes[i - 1][:, None, :]
    grads.reverse()
    return grads


def param_jacobian(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    """Exact d(output)/d(params).

    Returns ``(n_out, n_params)`` for a single input, or
    ``(batch, n_out, n_params)`` for a batch.  One reverse sweep per
    output coordinate, all coordinates swept together.
    """
    x, single = _as_batch(spec, x)
    layers, acts, slopes = _forward_cache(spec, params, x)
    batch = x.shape[0]
    seed = np.broadcast_to(np.eye(spec.n_out), (batch, spec.n_out, spec.n_out))
    grads = _reverse(spec, layers, acts, slopes, seed)
    jac = np.empty((batch, spec.n_out, spec.n_params))
    for (gW, gb), (_, _, ws, bs) in zip(grads, spec.slices()):
        jac[:, :, ws] = gW.reshape(batch, spec.n_out, -1)
        jac[:, :, bs] = gb
    return jac[0] if single else jac


def vjp(spec: MlpSpec, params: ParamVector, x, cotangent) -> np.ndarray:
    """Batch-summed vector-Jacobian product: sum_b cot[b] . d out[b] / d params."""
    x, _ = _as_batch(spec, x)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(x.shape[0], spec.n_out)
    layers, acts, slopes = _forward_cache(spec, params, x)
    out = np.empty(spec.n_params)
    slices = list(spec.slices())
    D = cot
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        _, _, ws, bs = slices[i]
        out[ws] = (D.T @ acts[i]).ravel()
        out[bs] = D.sum(axis=0)
        if i > 0:
            D = D @ W
            if slopes[i - 1] is not None:
                D = D * slopes[i - 1]
    return out


def save_params(path, spec: MlpSpec, params: ParamVector) -> None:
    params = check_params(spec, params)
    np.savetxt(path, params, fmt="%.17g", header=spec.header())


def load_params(path) -> tuple[MlpSpec, ParamVector]:
    path = Path(path)
    with path.open() as fh:
        spec = MlpSpec.from_header(fh.readline())
    values = np.atleast_1d(np.loadtxt(path, comments="#", dtype=np.float64))
    return spec, check_params(spec, values)

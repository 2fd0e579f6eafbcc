"""Unstacked DeepONet: one branch net, one trunk net, optional scalar bias.

    u(y; sample) = sum_k g_k(y) * b_k(branch_input) + b0

Flat parameter layout used for evolution (the order of gamma):
trunk parameters, then branch parameters, then ``b0`` if enabled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import net_core
from .net_core import MlpSpec


@dataclass(frozen=True)
class DeepONetModel:
    branch_spec: MlpSpec
    trunk_spec: MlpSpec
    use_bias: bool = True

    def __post_init__(self):
        if self.branch_spec.n_out != self.trunk_spec.n_out:
            raise ValueError(
                f"branch and trunk latent widths differ: "
                f"{self.branch_spec.n_out} vs {self.trunk_spec.n_out}"
            )
        if self.trunk_spec.n_in not in (1, 2):
            raise ValueError("trunk input dimension must be 1 or 2")

    @classmethod
    def build(cls, m: int, d: int, p: int = 40, hidden=(64, 64), use_bias: bool = True):
        hidden = tuple(hidden)
        return cls(MlpSpec((m, *hidden, p)), MlpSpec((d, *hidden, p)), use_bias)

    @property
    def p(self) -> int:
        return self.branch_spec.n_out

    @property
    def m(self) -> int:
        return self.branch_spec.n_in

    @property
    def d(self) -> int:
        return self.trunk_spec.n_in

    @property
    def n_branch(self) -> int:
        return self.branch_spec.n_params

    @property
    def n_trunk(self) -> int:
        return self.trunk_spec.n_params

    @property
    def n_params(self) -> int:
        return self.n_trunk + self.n_branch + int(self.use_bias)


@dataclass
class DeepONetWeights:
    branch: np.ndarray
    trunk: np.ndarray
    b0: float = 0.0

    def flat(self, model: DeepONetModel) -> np.ndarray:
        parts = [self.trunk, self.branch]
        if model.use_bias:
            parts.append(np.array([self.b0]))
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, model: DeepONetModel, vec) -> "DeepONetWeights":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (model.n_params,):
            raise ValueError(f"expected {model.n_params} entries, got {vec.shape}")
        nt, nb = model.n_trunk, model.n_branch
        b0 = float(vec[nt + nb]) if model.use_bias else 0.0
        return cls(branch=vec[nt:nt + nb].copy(), trunk=vec[:nt].copy(), b0=b0)

    def copy(self) -> "DeepONetWeights":
        return DeepONetWeights(self.branch.copy(), self.trunk.copy(), self.b0)


def init_weights(model: DeepONetModel, seed: int) -> DeepONetWeights:
    ss = np.random.SeedSequence(seed)
    kb, kt = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    return DeepONetWeights(
        branch=net_core.init_params(model.branch_spec, kb),
        trunk=net_core.init_params(model.trunk_spec, kt),
        b0=0.0,
    )


@dataclass
class FieldSample:
    branch_input: np.ndarray
    label: float = float("nan")

    def __post_init__(self):
        self.branch_input = np.asarray(self.branch_input, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.branch_input)):
            raise ValueError("branch input must be finite")


def _points(model: DeepONetModel, ys) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim == 1:
        ys = ys[:, None] if model.d == 1 else ys[None, :]
    if ys.ndim != 2 or ys.shape[1] != model.d:
        raise ValueError(f"query points must have dimension {model.d}, got shape {ys.shape}")
    return ys


def _branch_inputs(model: DeepONetModel, samples: Sequence[FieldSample]) -> np.ndarray:
    X = np.stack([s.branch_input for s in samples])
    if X.shape[1] != model.m:
        raise ValueError(f"branch input length {X.shape[1]} != sensor count {model.m}")
    return X


def evaluate(model: DeepONetModel, weights: DeepONetWeights, sample: FieldSample, y) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (model.d,):
        raise ValueError(f"query point must have length {model.d}")
    if sample.branch_input.shape != (model.m,):
        raise ValueError(f"branch input length {sample.branch_input.size} != sensor count {model.m}")
    b = net_core.forward(model.branch_spec, weights.branch, sample.branch_input)
    g = net_core.forward(model.trunk_spec, weights.trunk, y)
    out = float(b @ g)
    if model.use_bias:
        out += weights.b0
    return out


def latent(model: DeepONetModel, weights: DeepONetWeights, samples, ys):
    """Branch outputs ``(n_samples, p)`` and trunk outputs ``(n_points, p)``."""
    B = net_core.forward(model.branch_spec, weights.branch, _branch_inputs(model, samples))
    G = net_core.forward(model.trunk_spec, weights.trunk, _points(model, ys))
    return B, G


def evaluate_field(model: DeepONetModel, weights: DeepONetWeights, samples, ys) -> np.ndarray:
    """Matrix ``(n_samples, n_points)`` of network outputs."""
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    B, G = latent(model, weights, samples, ys)
    U = B @ G.T
    if model.use_bias:
        U += weights.b0
    return U


def stacked_jacobian(model: DeepONetModel, weights: DeepONetWeights, samples, ys) -> np.ndarray:
    """Jacobian of every (sample, point) output w.r.t. the flat parameters.

    Shape ``(n_samples, n_points, n_params)``; columns follow the flat layout
    (trunk block, branch block, bias).
    """
    X = _branch_inputs(model, samples)
    Y = _points(model, ys)
    ns, npt, p = X.shape[0], Y.shape[0], model.p
    nt, nb = model.n_trunk, model.n_branch
    B = net_core.forward(model.branch_spec, weights.branch, X)
    G = net_core.forward(model.trunk_spec, weights.trunk, Y)
    Jt = net_core.param_jacobian(model.trunk_spec, weights.trunk, Y)     # (npt, p, nt)
    Jb = net_core.param_jacobian(model.branch_spec, weights.branch, X)   # (ns, p, nb)
    out = np.empty((ns, npt, model.n_params))
    # trunk block: sum_k b_k dg_k/dtheta
    out[:, :, :nt] = (B @ Jt.transpose(1, 0, 2).reshape(p, npt * nt)).reshape(ns, npt, nt)
    # branch block: sum_k g_k db_k/dphi
    out[:, :, nt:nt + nb] = np.matmul(G[None, :, :], Jb)
    if model.use_bias:
        out[:, :, -1] = 1.0
    return out


def jacobian_blocks(model: DeepONetModel, weights: DeepONetWeights, sample: FieldSample, ys):
    """``(J1, J2)`` for one sample: trunk block and branch block.

    A trailing all-ones column for ``b0`` is appended to ``J2`` when the
    model carries a bias.
    """
    J = stacked_jacobian(model, weights, [sample], ys)[0]
    nt = model.n_trunk
    return J[:, :nt], J[:, nt:]


def save_model(path, model: DeepONetModel, weights: DeepONetWeights) -> None:
    header = {
        "branch": model.branch_spec.header(),
        "trunk": model.trunk_spec.header(),
        "p": model.p,
        "use_bias": model.use_bias,
        "b0": float(weights.b0).hex(),
    }
    payload = np.concatenate([weights.branch, weights.trunk])
    np.savetxt(path, payload, fmt="%.17g", header=json.dumps(header))


def load_model(path) -> tuple[DeepONetModel, DeepONetWeights]:
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline().lstrip("#").strip())
    model = DeepONetModel(
        MlpSpec.from_header(header["branch"]),
        MlpSpec.from_header(header["trunk"]),
        bool(header["use_bias"]),
    )
    if model.p != header["p"]:
        raise ValueError("latent width in header disagrees with the specs")
    vals = np.atleast_1d(np.loadtxt(path, comments="#", dtype=np.float64))
    nb = model.n_branch
    if vals.size != nb + model.n_trunk:
        raise ValueError(f"payload has {vals.size} values, expected {nb + model.n_trunk}")
    weights = DeepONetWeights(vals[:nb].copy(), vals[nb:].copy(), float.fromhex(header["b0"]))
    return model, weights

"""Initial-condition datasets and MSE pretraining of the DeepONet.

Adam (full batch by default), optionally followed by an L-BFGS polish.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from . import net_core
from .deeponet import DeepONetModel, DeepONetWeights, init_weights
from .families import Family

log = logging.getLogger(__name__)


@dataclass
class OperatorSample:
    branch_input: np.ndarray
    y: np.ndarray
    target: float
    label: float = float("nan")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 20000
    target_mse: float = 1e-6
    batch: int | None = None          # None: full batch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 0
    lbfgs_iters: int = 0              # quasi-Newton polish after Adam

    def __post_init__(self):
        if self.learning_rate <= 0 or self.target_mse <= 0:
            raise ValueError("learning_rate and target_mse must be positive")
        if self.max_epochs < 0 or self.lbfgs_iters < 0:
            raise ValueError("max_epochs and lbfgs_iters must be >= 0")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


def sample_params(param_range, n: int, seed: int) -> np.ndarray:
    lo, hi = param_range
    if hi < lo:
        raise ValueError(f"inverted parameter range {param_range}")
    return np.random.default_rng(seed).uniform(lo, hi, size=n)


def generate_dataset(family: Family, n_param_samples: int, sensor_grid, query_grid, param_range, seed: int = 0,
                     params=None) -> list[OperatorSample]:
    """One sample per (parameter, query point); parameters drawn uniformly unless given."""
    sensors = np.asarray(sensor_grid, dtype=np.float64)
    queries = np.asarray(query_grid, dtype=np.float64)
    if sensors.size == 0 or queries.size == 0:
        raise ValueError("sensor and query grids must be nonempty")
    queries = queries.reshape(len(queries), -1)
    if params is None:
        params = sample_params(param_range, n_param_samples, seed)
    out = []
    for a in params:
        a = float(a)
        u = family.branch_input(a, sensors)
        targets = family.initial(a, queries)
        out.extend(OperatorSample(u, y, float(t), a) for y, t in zip(queries, targets))
    return out


class _Packed:
    """Dataset folded onto its distinct branch inputs and query points."""

    def __init__(self, dataset: Sequence[OperatorSample]):
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        X = np.stack([s.branch_input for s in dataset])
        Y = np.stack([np.atleast_1d(s.y) for s in dataset])
        self.targets = np.array([s.target for s in dataset], dtype=np.float64)
        self.ux, self.ix = np.unique(X, axis=0, return_inverse=True)
        self.uy, self.iy = np.unique(Y, axis=0, return_inverse=True)
        self.ix, self.iy = self.ix.ravel(), self.iy.ravel()
        n = len(dataset)
        self.sx = sp.csr_matrix((np.ones(n), (self.ix, np.arange(n))), shape=(len(self.ux), n))
        self.sy = sp.csr_matrix((np.ones(n), (self.iy, np.arange(n))), shape=(len(self.uy), n))

    def predict(self, model, weights):
        B = net_core.forward(model.branch_spec, weights.branch, self.ux)
        G = net_core.forward(model.trunk_spec, weights.trunk, self.uy)
        pred = np.einsum("ij,ij->i", B[self.ix], G[self.iy])
        if model.use_bias:
            pred += weights.b0
        return pred, B, G


def dataset_mse(model: DeepONetModel, weights: DeepONetWeights, dataset) -> float:
    packed = dataset if isinstance(dataset, _Packed) else _Packed(dataset)
    pred, _, _ = packed.predict(model, weights)
    resid = pred - packed.targets
    return float(resid @ resid) / resid.size


def _loss_and_grad(model, weights, packed, rows=None):
    pred, B, G = packed.predict(model, weights)
    resid = pred - packed.targets
    if rows is not None:
        mask = np.zeros_like(resid)
        mask[rows] = 1.0
        resid = resid * mask
        n = len(rows)
    else:
        n = resid.size
    loss = float(resid @ resid) / n
    d = 2.0 * resid / n
    dB = packed.sx @ (d[:, None] * G[packed.iy])
    dG = packed.sy @ (d[:, None] * B[packed.ix])
    gb = net_core.vjp(model.branch_spec, weights.branch, packed.ux, dB)
    gt = net_core.vjp(model.trunk_spec, weights.trunk, packed.uy, dG)
    parts = [gt, gb]
    if model.use_bias:
        parts.append(np.array([d.sum()]))
    return loss, np.concatenate(parts)


def train_initial(model: DeepONetModel, dataset, config: TrainConfig, weights: DeepONetWeights | None = None):
    """Adam on the mean-squared error, then ``config.lbfgs_iters`` of L-BFGS.

    Returns the best weights seen and the running-minimum loss: one entry
    per Adam epoch, one for the weights left by the last Adam update when
    the epoch budget runs out, and one per L-BFGS iteration.
    ``history[-1]`` is the MSE of the returned weights.
    """
    packed = _Packed(dataset)
    if weights is None:
        weights = init_weights(model, config.seed)
    x = weights.flat(model)
    best_x, best = x.copy(), np.inf
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    rng = np.random.default_rng(config.seed)
    n = packed.targets.size
    history = []
    for epoch in range(config.max_epochs):
        rows = None
        if config.batch is not None and config.batch < n:
            rows = rng.choice(n, size=config.batch, replace=False)
        w = DeepONetWeights.from_flat(model, x)
        loss, grad = _loss_and_grad(model, w, packed, rows)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(epoch)
        full = loss if rows is None else dataset_mse(model, w, packed)
        if full < best:
            best, best_x = full, x.copy()
        history.append(best)
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d  mse %.3e", epoch, full)
        if best <= config.target_mse:
            break
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** (epoch + 1))
        vhat = v / (1 - b2 ** (epoch + 1))
        x = x - lr * mhat / (np.sqrt(vhat) + 1e-8)
    else:
        w = DeepONetWeights.from_flat(model, x)
        final = dataset_mse(model, w, packed)
        if not np.isfinite(final):
            raise TrainingDiverged(config.max_epochs)
        if final < best:
            best, best_x = final, x.copy()
        history.append(best)

    if config.lbfgs_iters and best > config.target_mse:
        best, best_x = _polish(model, packed, best_x, best, config, history)
    if best > config.target_mse:
        log.warning("pretraining stopped with mse %.3e > target %.1e", best, config.target_mse)
    return DeepONetWeights.from_flat(model, best_x), np.array(history)


def _polish(model, packed, x0, best, config, history):
    seen = {"x": x0, "f": best}

    def fun(x):
        loss, grad = _loss_and_grad(model, DeepONetWeights.from_flat(model, x), packed)
        if not np.isfinite(loss):
            # let the line search back off; a persistent NaN ends in failure below
            return np.inf, np.zeros_like(x)
        if loss < seen["f"]:
            seen["x"], seen["f"] = x.copy(), loss
        return loss, grad

    def stop(intermediate_result):
        history.append(seen["f"])
        if seen["f"] <= config.target_mse:
            raise StopIteration

    minimize(fun, x0, jac=True, method="L-BFGS-B", callback=stop,
             options=dict(maxiter=config.lbfgs_iters, maxcor=30, ftol=1e-16, gtol=1e-12))
    x = seen["x"]
    final = dataset_mse(model, DeepONetWeights.from_flat(model, x), packed)
    if not np.isfinite(final):
        raise TrainingDiverged(config.max_epochs + len(history))
    if not history or history[-1] != final:
        history.append(final)
    return final, x


FIELDS = ("label", "y", "target", "branch_input")


def write_dataset_csv(path, dataset: Sequence[OperatorSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = np.atleast_1d(dataset[0].y).size
        m = dataset[0].branch_input.size
        w.writerow(["label"] + [f"y{i}" for i in range(d)] + ["target"] + [f"u{i}" for i in range(m)])
        for s in dataset:
            w.writerow([repr(float(s.label))] + [repr(float(v)) for v in np.atleast_1d(s.y)]
                       + [repr(float(s.target))] + [repr(float(v)) for v in s.branch_input])


def read_dataset_csv(path) -> list[OperatorSample]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = sum(1 for h in header if h.startswith("y"))
        out = []
        for row in r:
            vals = np.array([float(v) for v in row])
            out.append(OperatorSample(vals[2 + d:], vals[1:1 + d], float(vals[1 + d]), float(vals[0])))
    return out

"""Ground-truth solutions and the error metric."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .energy import (
    Grid,
    GradientFlowProblem,
    free_energy,
    guard_energy,
    quadrature,
    read_field_csv,
    variational_derivative,
    write_field_csv,
)

log = logging.getLogger(__name__)


def heat_exact(a, x, t):
    return a * np.sin(np.pi * np.asarray(x)) * np.exp(-np.pi ** 2 * t)


def parametric_heat_exact(c, x, t):
    if np.any(np.asarray(c) <= 0):
        raise ValueError("c must be positive")
    return np.sin(np.pi * np.asarray(x)) * np.exp(-c * np.pi ** 2 * t)


class ReferenceBlowUp(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"reference solution became non-finite at step {step}")
        self.step = step


def sav_field_step(problem: GradientFlowProblem, u: np.ndarray, r: float, dt: float):
    """One first-order SAV step applied to grid values.

    Returns ``(u_next, r_next, energy_n)``.
    """
    energy, _ = guard_energy(free_energy(problem, u))
    nu = variational_derivative(problem, u)
    n_sq = quadrature(problem.grid, nu * nu)
    r_next = r / (1.0 + dt * n_sq / (2.0 * energy))
    u_next = u - dt * (r_next / np.sqrt(energy)) * nu
    return u_next, r_next, energy


def allen_cahn_reference(u0, eps: float, grid: Grid, t_final: float, dt_ref: float = 1e-5) -> np.ndarray:
    """Advance an Allen-Cahn field with the field-space first-order SAV scheme.

    The modified energy ``r**2`` is checked to be non-increasing at every step.
    """
    problem = GradientFlowProblem(grid, "allen-cahn", eps=eps)
    u = np.array(u0, dtype=np.float64).reshape(grid.shape)
    if t_final <= 0:
        return u
    n_steps = max(1, int(round(t_final / dt_ref)))
    dt = t_final / n_steps
    r = np.sqrt(guard_energy(free_energy(problem, u))[0])
    for step in range(n_steps):
        u, r_next, _ = sav_field_step(problem, u, r, dt)
        if not np.all(np.isfinite(u)):
            raise ReferenceBlowUp(step)
        if r_next * r_next > r * r + 1e-12:
            raise AssertionError(f"modified energy increased at reference step {step}")
        r = r_next
    return u


def mse_error(field, reference_field) -> float:
    u = np.asarray(field, dtype=np.float64).ravel()
    v = np.asarray(reference_field, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.size} vs {v.size}")
    return float(np.mean((u - v) ** 2))


@dataclass(frozen=True)
class ReferenceRun:
    """Key for a cached Allen-Cahn reference: initial data ``a * sin(pi x) [sin(pi y)]``."""

    a: float
    eps: float
    grid: Grid
    t_final: float
    dt_ref: float = 1e-5
    t_start: float = 0.0
    method: str = "sav-fd"

    def __post_init__(self):
        if self.method == "sav-fd" and self.dt_ref > 1e-5:
            raise ValueError("sav-fd reference runs need dt_ref <= 1e-5")

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]

    def initial(self) -> np.ndarray:
        return sine_bump(self.grid, self.a)


def sine_bump(grid: Grid, a: float) -> np.ndarray:
    ax = grid.axes()
    if grid.dim == 1:
        return a * np.sin(np.pi * ax[0])
    return a * np.outer(np.sin(np.pi * ax[1]), np.sin(np.pi * ax[0]))


def restrict(fine: Grid, coarse: Grid, field) -> np.ndarray:
    """Sample a fine-grid field at coarse-grid nodes (nodes must nest)."""
    field = np.asarray(field).reshape(fine.shape)
    strides = []
    for nf, nc, lf, lc, uf, uc in zip(fine.counts, coarse.counts, fine.lower, coarse.lower, fine.upper, coarse.upper):
        if (nf - 1) % (nc - 1) or lf != lc or uf != uc:
            raise ValueError("coarse grid nodes are not a subset of the fine grid")
        strides.append((nf - 1) // (nc - 1))
    if fine.dim == 1:
        return field[:: strides[0]]
    return field[:: strides[1], :: strides[0]]


def cached_reference(run: ReferenceRun, cache_dir=None) -> np.ndarray:
    """Solve (or load) the reference field at ``run.t_final``."""
    path = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        path = cache / f"ac_ref_{run.key()}.csv"
        if path.exists():
            return read_field_csv(path, run.grid)
    u0 = run.initial()
    if run.t_start > 0:
        u0 = allen_cahn_reference(u0, run.eps, run.grid, run.t_start, run.dt_ref)
    u = allen_cahn_reference(u0, run.eps, run.grid, run.t_final - run.t_start, run.dt_ref)
    if path is not None:
        write_field_csv(path, run.grid, u)
    return u

"""One energy-dissipative evolution step of the DeepONet parameters.

Per step: evaluate the fields, compute the sample-mean energy and the
variational derivatives, shrink the auxiliary variable ``r``, fit the
parameter velocity ``gamma`` to ``-xi * N`` by regularized least squares,
and take an explicit Euler step in parameter space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla

from .deeponet import DeepONetModel, DeepONetWeights, FieldSample, evaluate_field, stacked_jacobian
from .energy import Grid, GradientFlowProblem, free_energy, guard_energy, quadrature, variational_derivative

log = logging.getLogger(__name__)

DISSIPATION_TOL = 1e-12
DEFAULT_REG_SCALE = 1e-8


class DissipationViolation(AssertionError):
    pass


@dataclass
class SavState:
    r: float
    energy: float
    t: float
    dt: float
    step: int = 0
    xi: float = 1.0

    def __post_init__(self):
        if self.r < 0 or self.dt <= 0 or self.energy < 0:
            raise ValueError(f"invalid SAV state r={self.r} dt={self.dt} E={self.energy}")

    @classmethod
    def start(cls, energy: float, dt: float, t: float = 0.0) -> "SavState":
        return cls(r=float(np.sqrt(energy)), energy=float(energy), t=t, dt=dt)


@dataclass
class LsqSystem:
    jmat: np.ndarray
    rhs: np.ndarray
    reg: float = 0.0
    trace_scale: float = 1.0     # ||J||_F^2 / cols; reg = reg_scale * trace_scale

    def __post_init__(self):
        if self.jmat.ndim != 2 or self.jmat.shape[0] < 1 or self.rhs.shape != (self.jmat.shape[0],):
            raise ValueError("inconsistent least-squares system")
        if self.reg < 0:
            raise ValueError("regularization must be >= 0")


class LsqResult(NamedTuple):
    gamma: np.ndarray
    residual_norm: float
    stationarity: float          # ||J^T(J g - b) + reg g|| / ||J^T b||
    rank_deficient: bool
    reg: float = 0.0


@dataclass
class StepDiagnostics:
    step: int
    t: float
    dt_used: float
    r_before: float
    r_after: float
    energy_before: float
    energy_after: float
    xi: float
    lsq_residual_norm: float
    stationarity: float
    restart_flag: bool = False
    energy_floor: bool = False
    rank_deficient: bool = False
    reg_scale: float = DEFAULT_REG_SCALE
    euler_defect: float = float("nan")   # realized vs target velocity, relative
    r_reset: float = float("nan")        # sqrt(E^{n+1}) when a restart replaced r_after

    def __post_init__(self):
        if not self.restart_flag and self.r_after ** 2 > self.r_before ** 2 + DISSIPATION_TOL:
            raise DissipationViolation(
                f"step {self.step}: r^2 went from {self.r_before**2!r} to {self.r_after**2!r}"
            )


def update_r(r_n: float, energy_n: float, n_norm_sq: float, dt: float) -> float:
    """Decoupled auxiliary-variable update: r / (1 + dt |N|^2 / (2 E))."""
    if not energy_n > 0:
        raise ValueError(f"energy must be positive after the floor guard, got {energy_n}")
    if n_norm_sq < 0 or dt < 0:
        raise ValueError("n_norm_sq and dt must be non-negative")
    return r_n / (1.0 + dt * n_norm_sq / (2.0 * energy_n))


def row_weights(grid: Grid, n_samples: int = 1) -> np.ndarray:
    """sqrt(trapezoid weight / |domain| / n_samples) per grid point, flattened."""
    return np.sqrt(grid.weights().ravel() / (grid.volume * n_samples))


def _row_scale(sub: Grid, n_samples: int, boundary_weight: float) -> np.ndarray:
    w = row_weights(sub, n_samples)
    if boundary_weight != 1.0:
        w = np.where(sub.boundary_mask().ravel(), boundary_weight * w, w)
    return w


def collocation(grid: Grid, stride: int = 1):
    """Flat indices and sub-grid of every ``stride``-th node per axis (ends included)."""
    if stride < 1 or any((n - 1) % stride for n in grid.counts):
        raise ValueError(f"stride {stride} does not nest in grid counts {grid.counts}")
    if stride == 1:
        return np.arange(grid.size), grid
    sub = Grid(grid.lower, grid.upper, tuple((n - 1) // stride + 1 for n in grid.counts))
    idx = np.arange(grid.size).reshape(grid.shape)
    sl = tuple(slice(None, None, stride) for _ in grid.shape)
    return idx[sl].ravel(), sub


def field_state(model, weights, samples, grid: Grid, problems):
    """Fields, per-sample energies, variational derivatives and mean |N|^2."""
    problems = _problems(problems, len(samples))
    U = evaluate_field(model, weights, samples, grid.points())
    fields = U.reshape(len(samples), *grid.shape)
    energies = np.array([free_energy(p, f) for p, f in zip(problems, fields)])
    nfields = np.stack([variational_derivative(p, f) for p, f in zip(problems, fields)])
    n_sq = float(np.mean([quadrature(grid, n * n) for n in nfields]))
    return fields, energies, nfields, n_sq


def _problems(problems, n):
    if isinstance(problems, GradientFlowProblem):
        return [problems] * n
    problems = list(problems)
    if len(problems) != n:
        raise ValueError("one problem per sample required")
    return problems


def assemble_system(
    model: DeepONetModel,
    weights: DeepONetWeights,
    samples: Sequence[FieldSample],
    grid: Grid,
    problems,
    xi_coefficient: float,
    nfields=None,
    reg_scale: float = DEFAULT_REG_SCALE,
    stride: int = 1,
    boundary_weight: float = 1.0,
) -> LsqSystem:
    """Stack the quadrature-weighted rows ``[J1 | J2] gamma = -xi N`` of every sample.

    With ``stride > 1`` only the nodes of the nested sub-lattice become rows
    (N is still computed on the full grid), weighted by the sub-lattice
    trapezoid rule.  ``boundary_weight`` multiplies the Dirichlet rows.
    """
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    problems = _problems(problems, len(samples))
    if nfields is None:
        _, _, nfields, _ = field_state(model, weights, samples, grid, problems)
    rows, sub = collocation(grid, stride)
    J = stacked_jacobian(model, weights, samples, grid.points()[rows])
    bad = ~np.isfinite(J).all(axis=(0, 2))
    if bad.any():
        raise FloatingPointError(f"non-finite Jacobian at grid indices {rows[bad].tolist()}")
    w = _row_scale(sub, len(samples), boundary_weight)
    J *= w[None, :, None]
    rhs = -xi_coefficient * np.asarray(nfields).reshape(len(samples), -1)[:, rows] * w[None, :]
    J = J.reshape(-1, model.n_params)
    scale = float(np.einsum("ij,ij->", J, J)) / J.shape[1]
    return LsqSystem(J, rhs.ravel(), reg_scale * scale, scale)


class LsqFactor(NamedTuple):
    """Orthogonal factorization reused across ridge parameters.

    ``J = Q R`` (tall) or ``J^T = Q R`` (wide), and ``A = U diag(s) Vt``
    with ``A = R`` (tall) or ``A = R^T`` (wide).
    """

    Q: np.ndarray
    U: np.ndarray
    s: np.ndarray
    Vt: np.ndarray
    wide: bool


def factor_lsq(jmat: np.ndarray) -> LsqFactor:
    m, n = jmat.shape
    wide = m < n
    Q, R = sla.qr(jmat.T if wide else jmat, mode="economic", check_finite=False)
    U, s, Vt = sla.svd(R.T if wide else R, check_finite=False)
    return LsqFactor(Q, U, s, Vt, wide)


def ridge_solve(factor: LsqFactor, rhs: np.ndarray, reg: float) -> tuple[np.ndarray, bool]:
    """argmin ||J g - b||^2 + reg ||g||^2; minimum-norm when reg == 0."""
    Q, U, s, Vt, wide = factor
    cutoff = np.finfo(float).eps * max(Q.shape) * (s[0] if s.size else 0.0)
    deficient = bool(np.any(s <= cutoff))
    if reg > 0:
        f = s / (s * s + reg)
    else:
        f = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    c = U.T @ (rhs if wide else Q.T @ rhs)
    z = Vt.T @ (f * c)
    return (Q @ z if wide else z), deficient


def _result(system: LsqSystem, gamma, reg, deficient) -> LsqResult:
    J, b = system.jmat, system.rhs
    resid = J @ gamma - b
    grad = J.T @ resid + reg * gamma
    scale = np.linalg.norm(J.T @ b)
    stationarity = float(np.linalg.norm(grad) / scale) if scale > 0 else float(np.linalg.norm(grad))
    return LsqResult(gamma, float(np.linalg.norm(resid)), stationarity, deficient, reg)


def solve_lsq(system: LsqSystem, factor: LsqFactor | None = None, reg: float | None = None) -> LsqResult:
    """Minimize ``||J g - b||^2 + reg ||g||^2`` through a QR factorization.

    Wide systems factor ``J^T`` (the ridge solution lies in the row space);
    tall ones factor ``J``.  The remaining square problem is solved by SVD,
    which also yields the minimum-norm solution when ``reg == 0`` and ``J``
    is rank deficient.
    """
    factor = factor_lsq(system.jmat) if factor is None else factor
    reg = system.reg if reg is None else reg
    gamma, deficient = ridge_solve(factor, system.rhs, reg)
    if deficient and reg == 0:
        log.debug("rank-deficient least squares; using the minimum-norm solution")
    return _result(system, gamma, reg, deficient)


def euler_step(weights: DeepONetWeights, gamma, dt: float, model: DeepONetModel) -> DeepONetWeights:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (model.n_params,):
        raise ValueError(f"gamma has shape {gamma.shape}, expected ({model.n_params},)")
    return DeepONetWeights.from_flat(model, weights.flat(model) + dt * gamma)


def evolve_step(
    model: DeepONetModel,
    weights: DeepONetWeights,
    samples: Sequence[FieldSample],
    grid: Grid,
    problems,
    state: SavState,
    dt: float | None = None,
    reg_scale: float | Sequence[float] = DEFAULT_REG_SCALE,
    stride: int = 1,
    boundary_weight: float = 1.0,
) -> tuple[DeepONetWeights, SavState, StepDiagnostics]:
    """Advance the weights by one SAV/Euler step of size ``dt`` (default ``state.dt``).

    ``reg_scale`` may be a ladder of ridge scales.  The system is factored
    once; each candidate gamma is pushed through the Euler update and the one
    whose realized field velocity lands closest to the target ``-xi N`` (in
    the weighted row norm) is kept.
    """
    dt = state.dt if dt is None else dt
    problems = _problems(problems, len(samples))
    ladder = np.atleast_1d(np.asarray(reg_scale, dtype=np.float64))
    if ladder.size == 0 or np.any(ladder < 0):
        raise ValueError("reg_scale ladder must be nonempty and non-negative")

    fields, energies, nfields, n_sq = field_state(model, weights, samples, grid, problems)
    energy_n, floored = guard_energy(float(np.mean(energies)))
    r_next = update_r(state.r, energy_n, n_sq, dt)
    xi = r_next / np.sqrt(energy_n)

    system = assemble_system(model, weights, samples, grid, problems, xi, nfields, 1.0, stride, boundary_weight)
    factor = factor_lsq(system.jmat)
    rows, sub = collocation(grid, stride)
    w_rows = _row_scale(sub, len(samples), boundary_weight)
    u_rows = fields.reshape(len(samples), -1)[:, rows]
    b_norm = np.linalg.norm(system.rhs)
    best = None
    for scale in ladder:
        sol = solve_lsq(system, factor, scale * system.trace_scale)
        trial = euler_step(weights, sol.gamma, dt, model)
        if ladder.size == 1:
            best = (np.nan, scale, sol, trial)
            break
        moved = evaluate_field(model, trial, samples, grid.points()[rows])
        realized = ((moved - u_rows) / dt * w_rows[None, :]).ravel()
        defect = np.linalg.norm(realized - system.rhs) / b_norm if b_norm > 0 else np.linalg.norm(realized)
        if best is None or defect < best[0]:
            best = (float(defect), scale, sol, trial)
    defect, scale, sol, new_weights = best

    _, energies_next, _, _ = field_state(model, new_weights, samples, grid, problems)
    energy_next = float(np.mean(energies_next))
    diag = StepDiagnostics(
        step=state.step + 1,
        t=state.t + dt,
        dt_used=dt,
        r_before=state.r,
        r_after=r_next,
        energy_before=float(np.mean(energies)),
        energy_after=energy_next,
        xi=float(xi),
        lsq_residual_norm=sol.residual_norm,
        stationarity=sol.stationarity,
        energy_floor=floored,
        rank_deficient=sol.rank_deficient,
        reg_scale=float(scale),
        euler_defect=defect,
    )
    new_state = SavState(r=r_next, energy=energy_next, t=state.t + dt, dt=state.dt, step=state.step + 1, xi=float(xi))
    return new_weights, new_state, diag

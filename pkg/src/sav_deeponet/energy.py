"""Gradient-flow problems on uniform grids: energies, variational derivatives, quadrature.

Conventions
-----------
* A 1-D field is an array of shape ``(nx,)``; a 2-D field has shape
  ``(ny, nx)`` with ``field[j, i] = u(x_i, y_j)``.
* ``du/dt = -variational_derivative(u)``; boundary rows of the derivative
  are zero (homogeneous Dirichlet data does not move).
* The gradient part of the energy is summed over grid edges with forward
  differences.  Its exact discrete gradient with respect to interior
  nodes is the trapezoid weight times the 3-point (5-point) Laplacian, so
  the discrete pair (energy, derivative) is consistent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ENERGY_FLOOR = 1e-12


@dataclass(frozen=True)
class Grid:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        for name in ("lower", "upper", "counts"):
            val = getattr(self, name)
            if np.isscalar(val):
                val = (val,)
            object.__setattr__(self, name, tuple(val))
        if not (len(self.lower) == len(self.upper) == len(self.counts)) or self.dim not in (1, 2):
            raise ValueError("grid must be 1-D or 2-D with matching bounds and counts")
        if any(n < 3 for n in self.counts):
            raise ValueError("each axis needs at least 3 points")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("upper bound must exceed lower bound")

    @classmethod
    def line(cls, lower: float, upper: float, n: int) -> "Grid":
        return cls((float(lower),), (float(upper),), (int(n),))

    @classmethod
    def square(cls, lower: float, upper: float, n: int) -> "Grid":
        return cls((float(lower),) * 2, (float(upper),) * 2, (int(n),) * 2)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.counts))

    @property
    def shape(self) -> tuple[int, ...]:
        # 2-D fields are stored (ny, nx)
        return tuple(reversed(self.counts))

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in zip(self.lower, self.upper)]))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.counts)]

    def points(self) -> np.ndarray:
        """Grid points as ``(size, dim)``, in field-flattening order."""
        ax = self.axes()
        if self.dim == 1:
            return ax[0][:, None]
        X, Y = np.meshgrid(ax[0], ax[1])
        return np.column_stack([X.ravel(), Y.ravel()])

    def weights(self) -> np.ndarray:
        """Composite trapezoid weights, shaped like a field."""
        ws = []
        for h, n in zip(self.spacing, self.counts):
            w = np.full(n, h)
            w[0] = w[-1] = h / 2
            ws.append(w)
        if self.dim == 1:
            return ws[0]
        return np.outer(ws[1], ws[0])

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        if self.dim == 1:
            mask[[0, -1]] = True
        else:
            mask[[0, -1], :] = True
            mask[:, [0, -1]] = True
        return mask


KINDS = ("heat", "parametric-heat", "allen-cahn")


@dataclass(frozen=True)
class GradientFlowProblem:
    """One member of a gradient-flow family on a grid.

    ``heat``: E = int |grad u|^2 / 2.  ``parametric-heat``: E = int c |grad u|^2 / 2.
    ``allen-cahn``: E = int |grad u|^2 / 2 + (u^2 - 1)^2 / (4 eps^2), in 1-D or 2-D.
    """

    grid: Grid
    kind: str = "heat"
    c: float = 1.0
    eps: float = 0.1
    boundary_value: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.c <= 0 or self.eps <= 0:
            raise ValueError("c and eps must be positive")

    @property
    def diffusion(self) -> float:
        return self.c if self.kind == "parametric-heat" else 1.0


def _field(grid: Grid, values) -> np.ndarray:
    u = np.asarray(values, dtype=np.float64)
    if u.size != grid.size:
        raise ValueError(f"field has {u.size} values, grid has {grid.size}")
    return u.reshape(grid.shape)


def _finite(u):
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("field contains non-finite values")


def quadrature(grid: Grid, values) -> float:
    """Composite trapezoid rule over the grid domain."""
    return float(np.sum(grid.weights() * _field(grid, values)))


def gradient_energy(grid: Grid, u) -> float:
    """int |grad u|^2 / 2 summed over edges (forward differences)."""
    u = _field(grid, u)
    if grid.dim == 1:
        (h,) = grid.spacing
        return 0.5 * float(np.sum(np.diff(u) ** 2)) / h
    hx, hy = grid.spacing
    wx, wy = (Grid.line(lo, hi, n).weights() for lo, hi, n in zip(grid.lower, grid.upper, grid.counts))
    ex = np.diff(u, axis=1) ** 2 / hx ** 2      # (ny, nx-1)
    ey = np.diff(u, axis=0) ** 2 / hy ** 2      # (ny-1, nx)
    return 0.5 * float(hx * np.sum(wy[:, None] * ex) + hy * np.sum(wx[None, :] * ey))


def double_well(u, eps: float):
    return (u * u - 1.0) ** 2 / (4.0 * eps * eps)


def double_well_prime(u, eps: float):
    return u * (u * u - 1.0) / (eps * eps)


def free_energy(problem: GradientFlowProblem, field) -> float:
    u = _field(problem.grid, field)
    _finite(u)
    e = problem.diffusion * gradient_energy(problem.grid, u)
    if problem.kind == "allen-cahn":
        e += quadrature(problem.grid, double_well(u, problem.eps))
    return e


def laplacian(grid: Grid, u) -> np.ndarray:
    """3-point (1-D) or 5-point (2-D) Laplacian on interior nodes, zero on the boundary."""
    u = _field(grid, u)
    out = np.zeros_like(u)
    if grid.dim == 1:
        (h,) = grid.spacing
        out[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / h ** 2
    else:
        hx, hy = grid.spacing
        c = u[1:-1, 1:-1]
        out[1:-1, 1:-1] = (u[1:-1, 2:] - 2 * c + u[1:-1, :-2]) / hx ** 2 + (u[2:, 1:-1] - 2 * c + u[:-2, 1:-1]) / hy ** 2
    return out


def variational_derivative(problem: GradientFlowProblem, field) -> np.ndarray:
    u = _field(problem.grid, field)
    _finite(u)
    out = -problem.diffusion * laplacian(problem.grid, u)
    if problem.kind == "allen-cahn":
        out += double_well_prime(u, problem.eps)
    out[problem.grid.boundary_mask()] = 0.0
    return out


def mean_energy(problems, fields) -> float:
    """Arithmetic mean of the free energy over samples.

    ``problems`` is a single problem shared by every field, or one problem
    per field.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("need at least one field")
    if isinstance(problems, GradientFlowProblem):
        problems = [problems] * len(fields)
    if len(problems) != len(fields):
        raise ValueError("one problem per field required")
    return float(np.mean([free_energy(p, f) for p, f in zip(problems, fields)]))


def guard_energy(energy: float) -> tuple[float, bool]:
    """Clamp tiny energies so sqrt(E) >= 1e-6; returns (energy, clamped)."""
    if not np.isfinite(energy) or energy < 0:
        raise FloatingPointError(f"invalid energy {energy!r}")
    if energy < ENERGY_FLOOR:
        return ENERGY_FLOOR, True
    return energy, False


def write_field_csv(path, grid: Grid, field) -> None:
    u = np.atleast_2d(_field(grid, field))
    np.savetxt(path, u, delimiter=",", fmt="%.17g")


def read_field_csv(path, grid: Grid) -> np.ndarray:
    u = np.loadtxt(path, delimiter=",", dtype=np.float64)
    return _field(grid, u)


def write_fields_csv(path, grid: Grid, fields: Sequence, labels: Sequence[float]) -> None:
    """Several 1-D fields in one CSV: column ``x`` then one column per label."""
    if grid.dim != 1:
        raise ValueError("multi-field CSV is for 1-D grids")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + [repr(float(l)) for l in labels])
        cols = [grid.axes()[0]] + [_field(grid, f) for f in fields]
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])

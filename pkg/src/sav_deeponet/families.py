"""The experiment families: initial data, branch encoding and per-sample problem."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .energy import Grid, GradientFlowProblem
from .reference import allen_cahn_reference, sine_bump


def _sine(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    points = points.reshape(len(points), -1)
    return np.prod(np.sin(np.pi * points), axis=1)


def scaled_sine(a: float, points) -> np.ndarray:
    return a * _sine(points)


def unit_sine(_param: float, points) -> np.ndarray:
    return _sine(points)


@dataclass(frozen=True)
class Family:
    """How a scalar family parameter becomes initial data, branch input and a PDE.

    ``encoding`` is ``"sensors"`` (branch sees the initial field at the
    sensors) or ``"parameter"`` (branch sees the scalar parameter itself, for
    families whose initial data does not identify the PDE).
    """

    name: str
    kind: str
    dim: int
    encoding: str
    initial: Callable[[float, np.ndarray], np.ndarray]
    eps: float = 0.1

    def problem(self, param: float, grid: Grid) -> GradientFlowProblem:
        if self.name == "parametric-heat":
            return GradientFlowProblem(grid, "parametric-heat", c=param)
        if self.name == "ac1d-eps":
            return GradientFlowProblem(grid, "allen-cahn", eps=param)
        return GradientFlowProblem(grid, self.kind, eps=self.eps)

    def branch_input(self, param: float, sensors: np.ndarray) -> np.ndarray:
        if self.encoding == "parameter":
            return np.array([float(param)])
        return self.initial(param, np.asarray(sensors, dtype=np.float64))

    def branch_width(self, n_sensors: int) -> int:
        return 1 if self.encoding == "parameter" else n_sensors


class EpsilonOracleInitial:
    """u_eps(x, t_start) from the reference solver, started at amp * sin(pi x)."""

    def __init__(self, amp: float = 0.4, t_start: float = 0.02, fine: Grid | None = None, dt_ref: float = 1e-5):
        self.amp = amp
        self.t_start = t_start
        self.fine = fine or Grid.line(-1.0, 1.0, 201)
        self.dt_ref = dt_ref
        self._cache: dict[float, np.ndarray] = {}

    def field(self, eps: float) -> np.ndarray:
        eps = float(eps)
        if eps not in self._cache:
            u0 = sine_bump(self.fine, self.amp)
            self._cache[eps] = allen_cahn_reference(u0, eps, self.fine, self.t_start, self.dt_ref)
        return self._cache[eps]

    def __call__(self, eps: float, points: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(points)[:, 0] if np.ndim(points) == 2 else np.asarray(points)
        return np.interp(x, self.fine.axes()[0], self.field(eps))


def make_family(name: str, **kw) -> Family:
    if name == "heat":
        return Family(name, "heat", 1, "sensors", scaled_sine)
    if name == "parametric-heat":
        return Family(name, "parametric-heat", 1, "parameter", unit_sine)
    if name == "ac1d":
        return Family(name, "allen-cahn", 1, "sensors", scaled_sine, eps=kw.get("eps", 0.1))
    if name == "ac1d-eps":
        return Family(name, "allen-cahn", 1, "parameter", EpsilonOracleInitial(**kw))
    if name == "ac2d":
        return Family(name, "allen-cahn", 2, "sensors", scaled_sine, eps=kw.get("eps", 0.1))
    raise ValueError(f"unknown family {name!r}")


FAMILY_NAMES = ("heat", "parametric-heat", "ac1d", "ac1d-eps", "ac2d")

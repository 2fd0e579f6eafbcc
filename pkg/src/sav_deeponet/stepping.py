"""Adaptive time stepping and SAV restarts around :func:`evolve_step`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .sav_evolve import SavState, StepDiagnostics, evolve_step, DEFAULT_REG_SCALE

log = logging.getLogger(__name__)


@dataclass
class StepControlConfig:
    eps0: float = 1e-1          # shrink when |1 - xi| > eps0
    eps1: float = 1e-3          # grow when |1 - xi| < eps1
    eps2: float = 2e-2          # restart when |1 - xi| > eps2
    dt_init: float = 2.5e-4
    dt_min: float | None = None
    dt_max: float | None = None
    adaptive: bool = False
    restart: bool = True

    def __post_init__(self):
        if self.dt_min is None:
            self.dt_min = 1e-3 * self.dt_init
        if self.dt_max is None:
            self.dt_max = 1e3 * self.dt_init
        if not 0 < self.eps1 < self.eps0:
            raise ValueError("need 0 < eps1 < eps0")
        if self.eps2 <= 0:
            raise ValueError("eps2 must be positive")
        if not self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need dt_min <= dt_init <= dt_max")


def adapt_dt(xi: float, dt: float, cfg: StepControlConfig) -> float:
    dev = abs(1.0 - xi)
    if dev > cfg.eps0:
        return max(cfg.dt_min, dt / 2)
    if dev < cfg.eps1:
        return min(cfg.dt_max, 2 * dt)
    return dt


def maybe_restart(xi: float, state: SavState, energy_next: float, cfg: StepControlConfig):
    """Reset ``r`` to sqrt(E^{n+1}) when xi has drifted more than eps2 from 1."""
    if energy_next < 0:
        raise ValueError("energy must be non-negative")
    if abs(1.0 - xi) > cfg.eps2:
        return replace(state, r=float(np.sqrt(energy_next))), True
    return state, False


@dataclass
class EvolutionResult:
    weights: object
    state: SavState
    trace: list[StepDiagnostics]
    snapshots: dict[float, object] = field(default_factory=dict)


def run_evolution(
    model,
    weights,
    samples,
    grid,
    problems,
    cfg: StepControlConfig,
    n_steps: int,
    snapshot_times: Sequence[float] = (),
    t_final: float | None = None,
    reg_scale: float | Sequence[float] = DEFAULT_REG_SCALE,
    stride: int = 1,
    boundary_weight: float = 1.0,
    on_step: Callable[[StepDiagnostics], None] | None = None,
) -> EvolutionResult:
    """Evolve for ``n_steps`` steps or until ``t_final``.

    The step size is adapted once per completed step (no reject-and-retry).
    Steps are shortened to land exactly on snapshot times; the controller's
    nominal step is unaffected by that clipping.
    """
    from .sav_evolve import field_state

    _, energies, _, _ = field_state(model, weights, samples, grid, problems)
    state = SavState.start(float(np.mean(energies)), cfg.dt_init)
    pending = sorted(float(t) for t in snapshot_times)
    snapshots = {}
    if pending and pending[0] <= 0.0:
        snapshots[pending.pop(0)] = weights.copy()
    trace = []
    for _ in range(n_steps):
        if t_final is not None and state.t >= t_final * (1 - 1e-12):
            break
        dt = state.dt
        target = None
        limit = [t for t in (pending[0] if pending else None, t_final) if t is not None]
        if limit:
            stop = min(limit)
            if stop - state.t <= dt * (1 + 1e-9):
                dt, target = stop - state.t, stop
        weights, state, diag = evolve_step(model, weights, samples, grid, problems, state, dt=dt, reg_scale=reg_scale,
                                            stride=stride, boundary_weight=boundary_weight)
        if target is not None:
            state.t = diag.t = target
        if cfg.restart:
            state, restarted = maybe_restart(diag.xi, state, state.energy, cfg)
            if restarted:
                diag.restart_flag = True
                diag.r_reset = state.r
                log.info("restart at step %d (xi=%.4f)", diag.step, diag.xi)
        if cfg.adaptive:
            state.dt = adapt_dt(diag.xi, state.dt, cfg)
        trace.append(diag)
        if on_step is not None:
            on_step(diag)
        while pending and state.t >= pending[0] * (1 - 1e-12):
            snapshots[pending.pop(0)] = weights.copy()
    return EvolutionResult(weights, state, trace, snapshots)

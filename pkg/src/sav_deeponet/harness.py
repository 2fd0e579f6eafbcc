"""Experiment orchestration: config, pretrain, evolve, tables, traces, manifests."""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .deeponet import DeepONetModel, FieldSample, evaluate_field, save_model
from .energy import Grid, write_field_csv
from .families import Family, make_family
from .pretrain import TrainConfig, generate_dataset, sample_params, train_initial
from .reference import ReferenceRun, cached_reference, heat_exact, mse_error, parametric_heat_exact, restrict
from .sav_evolve import DEFAULT_REG_SCALE, DISSIPATION_TOL, StepDiagnostics
from .stepping import StepControlConfig, run_evolution

log = logging.getLogger(__name__)

OUTPUT_ENV = "SAV_DEEPONET_OUT"
TABLES = {1: "heat", 2: "parametric-heat", 3: "ac1d", 4: "ac2d"}


@dataclass
class GridSpec:
    lower: float
    upper: float
    n: int
    dim: int = 1

    def build(self) -> Grid:
        return Grid.line(self.lower, self.upper, self.n) if self.dim == 1 else Grid.square(self.lower, self.upper, self.n)


@dataclass
class ExperimentConfig:
    experiment: str
    grid: GridSpec
    param_range: tuple[float, float]
    n_sensors: int = 50                 # per axis; sensors on [lower, upper)
    n_param_samples: int = 50
    n_evolve_samples: int = 10
    p: int = 16
    hidden: tuple[int, ...] = (32, 32)
    train: TrainConfig = field(default_factory=TrainConfig)
    control: StepControlConfig = field(default_factory=StepControlConfig)
    n_steps: int = 400
    snapshot_times: tuple[float, ...] = ()
    eval_params: tuple[float, ...] = ()
    gate_params: tuple[float, ...] = ()
    gate_threshold: float = 1e-4
    reg_scale: tuple[float, ...] = (DEFAULT_REG_SCALE,)
    boundary_weight: float = 1.0
    stride: int = 1
    eps: float = 0.1
    ref_points: int = 201               # per axis, reference grid
    ref_dt: float = 1e-5
    ref_t_start: float = 0.0            # physical time of the network's t = 0
    data_seed: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        lo, hi = self.param_range
        if hi < lo:
            raise ValueError("inverted parameter range")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0 (0 means pretrain only)")
        if self.n_evolve_samples < 1 or self.n_evolve_samples > self.n_param_samples:
            raise ValueError("need 1 <= n_evolve_samples <= n_param_samples")
        if not self.reg_scale:
            raise ValueError("reg_scale needs at least one value")
        make_family(self.experiment)

    @property
    def dt(self) -> float:
        return self.control.dt_init

    def family(self) -> Family:
        return make_family(self.experiment)

    def sensors(self) -> np.ndarray:
        axis = np.linspace(self.grid.lower, self.grid.upper, self.n_sensors, endpoint=False)
        if self.grid.dim == 1:
            return axis
        X, Y = np.meshgrid(axis, axis)
        return np.column_stack([X.ravel(), Y.ravel()])

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("param_range", "hidden", "snapshot_times", "eval_params", "gate_params", "reg_scale"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data["grid"] = GridSpec(**data["grid"]) if isinstance(data.get("grid"), dict) else data["grid"]
        if isinstance(data.get("train"), dict):
            data["train"] = TrainConfig(**data["train"])
        if isinstance(data.get("control"), dict):
            data["control"] = StepControlConfig(**data["control"])
        for key in ("param_range", "hidden", "snapshot_times", "eval_params", "gate_params"):
            if key in data:
                data[key] = tuple(data[key])
        if "reg_scale" in data:
            data["reg_scale"] = tuple(np.atleast_1d(data["reg_scale"]).astype(float).tolist())
        return cls(**data)


LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3)


def canonical_config(name: str) -> ExperimentConfig:
    lbfgs = TrainConfig(max_epochs=3000, target_mse=1e-10, lbfgs_iters=15000, seed=0)
    if name == "heat":
        return ExperimentConfig(
            "heat", GridSpec(0.0, 2.0, 51), (1.0, 2.0), train=lbfgs,
            control=StepControlConfig(dt_init=2.5e-4), n_steps=400,
            snapshot_times=(0.025, 0.05, 0.075, 0.1), eval_params=(1.0, 1.5, 1.8, 2.5),
            gate_params=(1.0, 1.5, 1.8), gate_threshold=1e-4, reg_scale=LADDER,
        )
    if name == "parametric-heat":
        return ExperimentConfig(
            "parametric-heat", GridSpec(0.0, 2.0, 51), (1.0, 2.0), train=lbfgs,
            control=StepControlConfig(dt_init=2.5e-4), n_steps=400,
            snapshot_times=(0.025, 0.05, 0.075, 0.1), eval_params=(1.2, 1.5, 1.8, 2.5),
            gate_params=(1.2, 1.5, 1.8), gate_threshold=1e-4, reg_scale=LADDER,
        )
    if name == "ac1d":
        return ExperimentConfig(
            "ac1d", GridSpec(-1.0, 1.0, 51), (0.1, 0.5), train=lbfgs,
            control=StepControlConfig(dt_init=1e-4), n_steps=400,
            snapshot_times=(0.01, 0.02, 0.03, 0.04), eval_params=(0.1, 0.2, 0.3, 0.4, 0.6),
            gate_params=(0.1, 0.2, 0.3, 0.4), gate_threshold=5e-3, reg_scale=LADDER, boundary_weight=10.0,
        )
    if name == "ac1d-eps":
        return ExperimentConfig(
            "ac1d-eps", GridSpec(-1.0, 1.0, 51), (0.1, 0.2), train=lbfgs,
            control=StepControlConfig(dt_init=1e-4, adaptive=True), n_steps=400,
            snapshot_times=(0.01, 0.02, 0.03, 0.04), eval_params=(0.1, 0.15, 0.2, 0.25),
            gate_params=(), reg_scale=LADDER, boundary_weight=10.0, ref_t_start=0.02,
        )
    if name == "ac2d":
        return ExperimentConfig(
            "ac2d", GridSpec(-1.0, 1.0, 51, dim=2), (0.1, 0.4), n_sensors=10, n_param_samples=20,
            n_evolve_samples=4, train=replace(lbfgs, lbfgs_iters=5000), control=StepControlConfig(dt_init=2e-4),
            n_steps=150, snapshot_times=(0.01, 0.02, 0.03), eval_params=(0.15, 0.2, 0.3, 0.35, 0.4),
            gate_params=(0.15, 0.2, 0.3, 0.35), gate_threshold=2e-2, reg_scale=LADDER, boundary_weight=10.0,
            stride=2, ref_points=101,
        )
    raise ValueError(f"unknown experiment {name!r}")


def load_config(path) -> ExperimentConfig:
    """YAML file; keys override the canonical config named by ``experiment``."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if "experiment" not in data:
        raise ValueError(f"{path}: missing 'experiment' key")
    base = canonical_config(data["experiment"]).to_dict()
    for key, value in data.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return ExperimentConfig.from_dict(base)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# ---------------------------------------------------------------- traces

TRACE_COLUMNS = ("step", "t", "dt", "r2", "r2_sav", "E", "xi", "residual", "stationarity",
                 "reg_scale", "euler_defect", "restart", "energy_floor")


class TraceInvariantError(ValueError):
    pass


@dataclass
class EvolutionTrace:
    """Per-step records.  ``r2_sav`` is r^2 straight from the SAV update,
    ``r2`` the value carried forward (after a restart, if any)."""

    rows: list[dict]

    @classmethod
    def from_run(cls, energy0: float, trace: Sequence[StepDiagnostics]) -> "EvolutionTrace":
        rows = [dict(step=0, t=0.0, dt=0.0, r2=energy0, r2_sav=energy0, E=energy0, xi=1.0, residual=0.0,
                     stationarity=0.0, reg_scale=0.0, euler_defect=0.0, restart=0, energy_floor=0)]
        for d in trace:
            r = d.r_reset if d.restart_flag else d.r_after
            rows.append(dict(step=d.step, t=d.t, dt=d.dt_used, r2=r ** 2, r2_sav=d.r_after ** 2,
                             E=d.energy_after, xi=d.xi, residual=d.lsq_residual_norm, stationarity=d.stationarity,
                             reg_scale=d.reg_scale, euler_defect=d.euler_defect,
                             restart=int(d.restart_flag), energy_floor=int(d.energy_floor)))
        return cls(rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def validate(self) -> None:
        t = self.column("t")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise TraceInvariantError("trace times are not strictly increasing")
        r2, r2_sav = self.column("r2"), self.column("r2_sav")
        bad = np.flatnonzero(r2_sav[1:] > r2[:-1] + DISSIPATION_TOL)
        if bad.size:
            k = int(bad[0]) + 1
            raise TraceInvariantError(f"modified energy increased at step {self.rows[k]['step']}")

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})

    @classmethod
    def read(cls, path) -> "EvolutionTrace":
        with open(path, newline="") as fh:
            rows = []
            for raw in csv.DictReader(fh):
                row = {k: float(v) for k, v in raw.items()}
                for k in ("step", "restart", "energy_floor"):
                    row[k] = int(row[k])
                rows.append(row)
        trace = cls(rows)
        trace.validate()
        return trace


def restart_coverage(trace: EvolutionTrace, eps2: float) -> float:
    """Fraction of steps with |1 - xi| > eps2 that end in a restart (1.0 when none drift)."""
    xi, restart = trace.column("xi")[1:], trace.column("restart")[1:]
    drift = np.abs(1.0 - xi) > eps2
    return float(restart[drift].mean()) if drift.any() else 1.0


# ---------------------------------------------------------------- references

def reference_field(cfg: ExperimentConfig, param: float, t: float, cache_dir=None) -> np.ndarray:
    grid = cfg.grid.build()
    if cfg.experiment == "heat":
        return heat_exact(param, grid.axes()[0], t)
    if cfg.experiment == "parametric-heat":
        return parametric_heat_exact(param, grid.axes()[0], t)
    fine = GridSpec(cfg.grid.lower, cfg.grid.upper, cfg.ref_points, cfg.grid.dim).build()
    if cfg.experiment == "ac1d-eps":
        amp = cfg.family().initial.amp
        run = ReferenceRun(amp, param, fine, cfg.ref_t_start + t, cfg.ref_dt, t_start=cfg.ref_t_start)
    else:
        run = ReferenceRun(param, cfg.eps, fine, t, cfg.ref_dt)
    return restrict(fine, grid, cached_reference(run, cache_dir)).ravel()


# ---------------------------------------------------------------- runs

@dataclass
class RunResult:
    out_dir: Path
    errors: dict[float, dict[float, float]]      # param -> time -> mse
    gate: dict[float, dict[float, bool]]
    passed: bool
    trace: EvolutionTrace | None
    wall_time: float


def evolution_params(params: np.ndarray, k: int) -> np.ndarray:
    """k order statistics of the training parameters, spread over their range."""
    srt = np.sort(params)
    return srt[np.linspace(0, len(srt) - 1, k).round().astype(int)]


def _fmt_t(t: float) -> str:
    return f"{t:.6g}"


def gate_table(cfg: ExperimentConfig, errors) -> dict[float, dict[float, bool]]:
    gate = {}
    for a in cfg.gate_params:
        gate[a] = {t: bool(e <= cfg.gate_threshold) for t, e in errors[a].items() if t > 0}
    return gate


def run_experiment(cfg: ExperimentConfig, out_dir=None, cache_dir=None) -> RunResult:
    """Pretrain, evolve and tabulate one experiment; artifacts go to ``out_dir``.

    On failure the partial artifacts stay in place next to a ``FAILED``
    marker holding the traceback, and the exception propagates.
    """
    out = Path(out_dir or cfg.output_dir or output_root() / cfg.experiment)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    cache_dir = cache_dir or output_root() / "reference_cache"
    dump_config(cfg, out / "config.yaml")
    t0 = time.time()
    manifest = dict(experiment=cfg.experiment, config=cfg.to_dict(), seeds=dict(data=cfg.data_seed, init=cfg.train.seed),
                    version=__version__, numpy=np.__version__, python=platform.python_version(), status="running")
    try:
        result = _run(cfg, out, cache_dir, manifest)
    except BaseException:
        (out / "FAILED").write_text(traceback.format_exc())
        manifest.update(status="failed", wall_time=time.time() - t0)
        _write_json(out / "manifest.json", manifest)
        raise
    result.wall_time = time.time() - t0
    manifest.update(status="passed" if result.passed else "gate-failed", wall_time=result.wall_time)
    _write_json(out / "manifest.json", manifest)
    return result


def _run(cfg: ExperimentConfig, out: Path, cache_dir, manifest) -> RunResult:
    family = cfg.family()
    grid = cfg.grid.build()
    sensors = cfg.sensors()
    params = sample_params(cfg.param_range, cfg.n_param_samples, cfg.data_seed)
    dataset = generate_dataset(family, len(params), sensors, grid.points(), cfg.param_range, params=params)
    m = family.branch_width(len(sensors))
    model = DeepONetModel.build(m, grid.dim, cfg.p, cfg.hidden)

    t = time.time()
    weights, history = train_initial(model, dataset, cfg.train)
    manifest["pretrain"] = dict(mse=float(history[-1]), iterations=len(history), seconds=time.time() - t)
    save_model(out / "weights_initial.txt", model, weights)
    np.savetxt(out / "pretrain_history.csv", history, header="running_min_mse", comments="", fmt="%.17g")

    def sample(a):
        return FieldSample(family.branch_input(a, sensors), a)

    ev = evolution_params(params, cfg.n_evolve_samples)
    manifest["evolve_params"] = ev.tolist()
    trace = None
    snaps = {0.0: weights}
    if cfg.n_steps > 0:
        samples = [sample(a) for a in ev]
        problems = [family.problem(a, grid) for a in ev]
        t = time.time()
        res = run_evolution(model, weights, samples, grid, problems, cfg.control, cfg.n_steps,
                            snapshot_times=(0.0,) + tuple(cfg.snapshot_times), reg_scale=cfg.reg_scale,
                            stride=cfg.stride, boundary_weight=cfg.boundary_weight,
                            t_final=max(cfg.snapshot_times) if cfg.snapshot_times and not cfg.control.adaptive else None)
        manifest["evolve"] = dict(seconds=time.time() - t, steps=len(res.trace), t_final=res.state.t,
                                  restarts=[d.step for d in res.trace if d.restart_flag])
        energy0 = res.trace[0].energy_before if res.trace else 0.0
        trace = EvolutionTrace.from_run(energy0, res.trace)
        trace.write(out / "trace.csv")
        trace.validate()
        snaps = dict(res.snapshots)
        if cfg.control.adaptive:
            snaps[res.state.t] = res.weights
        save_model(out / "weights_final.txt", model, res.weights)

    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    times = sorted(snaps)
    errors = {}
    for a in cfg.eval_params:
        errors[a] = {}
        s = sample(a)
        for tt in times:
            u = evaluate_field(model, snaps[tt], [s], grid.points())[0]
            ref = reference_field(cfg, a, tt, cache_dir)
            stem = f"p{a:g}_t{_fmt_t(tt)}"
            write_field_csv(snap_dir / f"{stem}_model.csv", grid, u)
            write_field_csv(snap_dir / f"{stem}_reference.csv", grid, ref)
            errors[a][tt] = mse_error(u, ref)
    write_error_table(out / "errors.csv", errors, times)
    gate = gate_table(cfg, errors)
    passed = all(all(row.values()) for row in gate.values())
    manifest["gate"] = {str(a): {_fmt_t(t): ok for t, ok in row.items()} for a, row in gate.items()}
    return RunResult(out, errors, gate, passed, trace, 0.0)


def write_error_table(path, errors, times) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param"] + [_fmt_t(t) for t in times])
        for a, row in errors.items():
            w.writerow([f"{a:g}"] + [repr(row[t]) for t in times])


def read_error_table(path) -> dict[float, dict[float, float]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        times = [float(t) for t in next(r)[1:]]
        return {float(row[0]): dict(zip(times, map(float, row[1:]))) for row in r}


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=float)


# ---------------------------------------------------------------- tables

def format_matrix(result: RunResult, cfg: ExperimentConfig) -> str:
    times = sorted({t for row in result.errors.values() for t in row})
    lines = ["param  " + "  ".join(f"T={_fmt_t(t):<8}" for t in times)]
    for a, row in result.errors.items():
        cells = []
        for t in times:
            mark = ""
            if a in result.gate and t in result.gate[a]:
                mark = " ok" if result.gate[a][t] else " FAIL"
            cells.append(f"{row[t]:.2e}{mark}".ljust(10))
        lines.append(f"{a:<6g} " + "  ".join(cells))
    lines.append(f"gate: cells for {list(cfg.gate_params)} <= {cfg.gate_threshold:g} -> "
                 + ("PASS" if result.passed else "FAIL"))
    return "\n".join(lines)


def reproduce(table_id: int, out_root=None) -> RunResult:
    if table_id not in TABLES:
        raise ValueError(f"unknown table {table_id}; choose from {sorted(TABLES)}")
    cfg = canonical_config(TABLES[table_id])
    root = Path(out_root) if out_root else output_root()
    return run_experiment(cfg, root / f"table{table_id}", cache_dir=root / "reference_cache")

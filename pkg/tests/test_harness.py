import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

from sav_deeponet import cli, harness
from sav_deeponet.energy import read_field_csv
from sav_deeponet.harness import (
    EvolutionTrace,
    GridSpec,
    TraceInvariantError,
    canonical_config,
    dump_config,
    evolution_params,
    load_config,
    read_error_table,
    restart_coverage,
    run_experiment,
)
from sav_deeponet.plots import emit_plots
from sav_deeponet.pretrain import TrainConfig
from sav_deeponet.reference import mse_error
from sav_deeponet.stepping import StepControlConfig


def tiny(name="heat", **kw):
    base = canonical_config(name)
    small = dict(
        n_sensors=10, n_param_samples=6, n_evolve_samples=3, p=4, hidden=(8,),
        train=TrainConfig(max_epochs=200, target_mse=1e-8, lbfgs_iters=100),
        n_steps=8, snapshot_times=(0.001, 0.002),
    )
    if name.startswith("ac"):
        small.update(snapshot_times=(0.0004, 0.0008), ref_points=101)
    if name == "ac2d":
        small.update(grid=GridSpec(-1.0, 1.0, 9, dim=2), n_sensors=4, ref_points=17, n_steps=4,
                     eval_params=(0.2, 0.3), gate_params=(0.2,))
    small.update(kw)
    return replace(base, **small)


@pytest.mark.parametrize("name", ["heat", "parametric-heat", "ac1d", "ac1d-eps", "ac2d"])
def test_config_roundtrip(tmp_path, name):
    cfg = canonical_config(name)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_load_config_overrides(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"experiment": "ac1d", "n_steps": 7, "control": {"eps2": 0.05}}))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.n_steps == 7 and cfg.control.eps2 == 0.05
    assert cfg.control.dt_init == canonical_config("ac1d").control.dt_init
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"experiment": "heat", "colour": 3}))
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "none.yaml").write_text("n_steps: 3\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "none.yaml")


def test_canonical_constants():
    heat = canonical_config("heat")
    assert heat.dt * heat.n_steps == pytest.approx(0.1)
    assert heat.grid.build().counts == (51,)
    assert len(heat.sensors()) == 50 and heat.sensors().max() < 2.0
    ac = canonical_config("ac1d")
    assert (ac.grid.lower, ac.grid.upper, ac.dt, ac.eps) == (-1.0, 1.0, 1e-4, 0.1)
    assert canonical_config("ac1d-eps").control.adaptive
    assert canonical_config("ac2d").dt == 2e-4
    with pytest.raises(ValueError):
        canonical_config("table5")


def test_evolution_params_spread():
    ev = evolution_params(np.array([0.5, 0.1, 0.9, 0.3, 0.7]), 3)
    np.testing.assert_array_equal(ev, [0.1, 0.5, 0.9])


@pytest.fixture(scope="module")
def heat_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("heat")
    cfg = tiny("heat", control=StepControlConfig(dt_init=2.5e-4, eps2=1e-4))
    return cfg, run_experiment(cfg, out, cache_dir=out / "cache")


def test_run_artifacts(heat_run):
    cfg, res = heat_run
    out = res.out_dir
    for name in ("config.yaml", "weights_initial.txt", "weights_final.txt", "trace.csv", "errors.csv",
                 "manifest.json", "pretrain_history.csv"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == {"data": cfg.data_seed, "init": cfg.train.seed}
    assert manifest["wall_time"] > 0
    assert load_config(out / "config.yaml") == cfg
    assert not (out / "FAILED").exists()


def test_error_table_matches_snapshots(heat_run):
    cfg, res = heat_run
    grid = cfg.grid.build()
    table = read_error_table(res.out_dir / "errors.csv")
    assert set(table) == set(cfg.eval_params)
    for a, row in table.items():
        assert sorted(row) == [0.0, 0.001, 0.002]
        for t, cell in row.items():
            stem = res.out_dir / "snapshots" / f"p{a:g}_t{t:.6g}"
            u = read_field_csv(f"{stem}_model.csv", grid)
            ref = read_field_csv(f"{stem}_reference.csv", grid)
            assert abs(cell - mse_error(u, ref)) <= 1e-15


def test_trace_file_validates(heat_run):
    cfg, res = heat_run
    trace = EvolutionTrace.read(res.out_dir / "trace.csv")
    assert len(trace.rows) == len(res.trace.rows)
    assert trace.rows[-1]["t"] == pytest.approx(0.002)
    assert restart_coverage(trace, cfg.control.eps2) == 1.0


def test_trace_invariant_detects_growth(heat_run, tmp_path):
    _, res = heat_run
    rows = [dict(r) for r in res.trace.rows]
    rows[2]["r2_sav"] = rows[1]["r2"] * 1.01
    rows[2]["restart"] = 0
    bad = EvolutionTrace(rows)
    with pytest.raises(TraceInvariantError):
        bad.validate()
    bad.write(tmp_path / "t.csv")
    with pytest.raises(TraceInvariantError):
        EvolutionTrace.read(tmp_path / "t.csv")
    rows = [dict(r) for r in res.trace.rows]
    rows[3]["t"] = rows[2]["t"]
    with pytest.raises(TraceInvariantError):
        EvolutionTrace(rows).validate()


def test_plots(heat_run):
    cfg, res = heat_run
    written = emit_plots(res.out_dir)
    names = {p.name for p in written}
    assert {"energy_trace.dat", "energy_trace.svg"} <= names
    assert len([n for n in names if n.startswith("overlay_") and n.endswith(".svg")]) == len(cfg.eval_params)
    data = np.loadtxt(res.out_dir / "plots" / "energy_trace.dat")
    assert data.shape[1] == 4
    svg = (res.out_dir / "plots" / "overlay_p1.5.svg").read_text()
    table = read_error_table(res.out_dir / "errors.csv")
    # the legend annotation carries the recomputed error of each snapshot
    assert f"mse {table[1.5][0.002]:.2e}" in svg


def test_plot_empty_trace_writes_nothing(tmp_path):
    from sav_deeponet.plots import energy_figure

    with pytest.raises(ValueError):
        energy_figure(EvolutionTrace([]), tmp_path)
    assert list(tmp_path.iterdir()) == []
    with pytest.raises(FileNotFoundError):
        emit_plots(tmp_path)


def test_pretrain_only_run(tmp_path):
    cfg = tiny("heat", n_steps=0)
    res = run_experiment(cfg, tmp_path / "p", cache_dir=tmp_path / "c")
    table = read_error_table(tmp_path / "p" / "errors.csv")
    assert all(list(row) == [0.0] for row in table.values())
    assert res.trace is None and not (tmp_path / "p" / "trace.csv").exists()
    hist = np.loadtxt(tmp_path / "p" / "pretrain_history.csv", skiprows=1)
    # in-range errors at T = 0 are of the order of the pretraining error
    in_range = [table[a][0.0] for a in cfg.gate_params]
    assert max(in_range) < 20 * hist[-1]


def test_artifacts_deterministic(tmp_path, heat_run):
    cfg, res = heat_run
    again = run_experiment(cfg, tmp_path / "again", cache_dir=tmp_path / "c")
    for name in ("weights_initial.txt", "weights_final.txt", "trace.csv", "errors.csv", "pretrain_history.csv"):
        assert (again.out_dir / name).read_bytes() == (res.out_dir / name).read_bytes(), name


@pytest.mark.parametrize("name", ["parametric-heat", "ac1d", "ac1d-eps", "ac2d"])
def test_other_families_run(tmp_path, name):
    res = run_experiment(tiny(name), tmp_path / name, cache_dir=tmp_path / "c")
    assert (tmp_path / name / "errors.csv").exists()
    res.trace.validate()
    assert all(np.isfinite(v) for row in res.errors.values() for v in row.values())


def test_failure_marker(tmp_path, monkeypatch):
    def blow_up(*args, **kwargs):
        raise FloatingPointError("evolution blew up at step 3")

    monkeypatch.setattr(harness, "run_evolution", blow_up)
    with pytest.raises(FloatingPointError):
        run_experiment(tiny("heat"), tmp_path / "f", cache_dir=tmp_path / "c")
    assert "step 3" in (tmp_path / "f" / "FAILED").read_text()
    assert (tmp_path / "f" / "weights_initial.txt").exists()
    assert json.loads((tmp_path / "f" / "manifest.json").read_text())["status"] == "failed"


def test_reproduce_unknown_table():
    with pytest.raises(ValueError):
        harness.reproduce(7)
    with pytest.raises(SystemExit) as info:
        cli.main(["reproduce", "7"])
    assert info.value.code == 2


def test_cli_oracle_and_plot(tmp_path, heat_run, capsys):
    out = tmp_path / "o.csv"
    assert cli.main(["oracle", "heat", "--a", "1.5", "--t", "0.05", "--points", "51", "--out", str(out)]) == 0
    u = np.loadtxt(out, delimiter=",")
    np.testing.assert_allclose(u, 1.5 * np.sin(np.pi * np.linspace(0, 2, 51)) * np.exp(-0.05 * np.pi ** 2), atol=1e-15)
    assert cli.main(["plot", str(heat_run[1].out_dir)]) == 0
    assert "energy_trace.svg" in capsys.readouterr().out
    assert cli.main(["plot", str(tmp_path / "missing")]) == 2


def test_cli_evolve_exit_code(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path))
    cfg = tiny("heat", n_steps=2, snapshot_times=(0.0005,), gate_threshold=1e-30)
    dump_config(cfg, tmp_path / "c.yaml")
    assert cli.main(["evolve", str(tmp_path / "c.yaml")]) == 1
    assert (tmp_path / "heat" / "errors.csv").exists()
    dump_config(replace(cfg, gate_threshold=1e3), tmp_path / "c.yaml")
    assert cli.main(["pretrain", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "pre")]) == 0
    assert not (tmp_path / "pre" / "trace.csv").exists()

"""Figure data (plain text) and SVG renderings for a finished run directory."""

from __future__ import annotations

import re
from collections import defaultdict
from pathlib import Path

import numpy as np

from .energy import read_field_csv
from .harness import EvolutionTrace, load_config
from .reference import mse_error

_SNAP = re.compile(r"p(?P<p>[^_]+)_t(?P<t>[^_]+)_model\.csv$")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def energy_figure(trace: EvolutionTrace, out: Path) -> list[Path]:
    if len(trace.rows) < 2:
        raise ValueError("trace has no evolution steps")
    step, r2, E, restart = (trace.column(c) for c in ("step", "r2", "E", "restart"))
    dat = out / "energy_trace.dat"
    np.savetxt(dat, np.column_stack([step, r2, E, restart]), header="step r2 E restart", fmt="%.10g")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(step, r2, label="modified energy $r^2$")
    ax.plot(step, E, "--", label="energy $E$")
    hit = restart > 0
    if hit.any():
        ax.plot(step[hit], r2[hit], "kx", label="restart")
    ax.set_xlabel("step")
    ax.set_ylabel("energy")
    ax.legend()
    fig.tight_layout()
    svg = out / "energy_trace.svg"
    fig.savefig(svg)
    plt.close(fig)
    return [dat, svg]


def overlay_figures(run_dir: Path, out: Path) -> list[Path]:
    cfg = load_config(run_dir / "config.yaml")
    grid = cfg.grid.build()
    snaps = defaultdict(dict)
    for path in sorted((run_dir / "snapshots").glob("*_model.csv")):
        m = _SNAP.search(path.name)
        if m:
            snaps[m["p"]][float(m["t"])] = path
    if not snaps:
        raise FileNotFoundError(f"no snapshot CSVs under {run_dir / 'snapshots'}")
    x = grid.axes()[0]
    plt = _pyplot()
    written = []
    for label, by_time in snaps.items():
        cols, names = [x], ["x"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for t, path in sorted(by_time.items()):
            u = read_field_csv(path, grid)
            ref = read_field_csv(str(path).replace("_model.csv", "_reference.csv"), grid)
            err = mse_error(u, ref)
            if grid.dim == 2:
                # midline slice y = 0 for display; the annotation uses the full field
                u, ref = u[grid.shape[0] // 2], ref[grid.shape[0] // 2]
            cols += [u, ref]
            names += [f"model_t{t:g}", f"reference_t{t:g}"]
            line, = ax.plot(x, u, label=f"T={t:g} (mse {err:.2e})")
            ax.plot(x, ref, "x", color=line.get_color(), markersize=3)
        ax.set_xlabel("x" if grid.dim == 1 else "x (y = 0)")
        ax.set_ylabel("u")
        ax.set_title(f"{cfg.experiment}, parameter {label}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        stem = out / f"overlay_p{label}"
        np.savetxt(f"{stem}.dat", np.column_stack(cols), header=" ".join(names), fmt="%.10g")
        fig.savefig(f"{stem}.svg")
        plt.close(fig)
        written += [Path(f"{stem}.dat"), Path(f"{stem}.svg")]
    return written


def emit_plots(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    if not (run_dir / "config.yaml").exists():
        raise FileNotFoundError(f"{run_dir} is not a run directory")
    out = run_dir / "plots"
    out.mkdir(exist_ok=True)
    written = []
    trace_path = run_dir / "trace.csv"
    if trace_path.exists():
        written += energy_figure(EvolutionTrace.read(trace_path), out)
    written += overlay_figures(run_dir, out)
    return written

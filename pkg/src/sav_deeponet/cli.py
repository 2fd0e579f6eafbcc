"""Command-line entry point.

    sav-deeponet pretrain <config.yaml>
    sav-deeponet evolve <config.yaml>
    sav-deeponet reproduce <1|2|3|4>
    sav-deeponet oracle allen-cahn --a 0.3 --t 0.04
    sav-deeponet plot <run-dir>

Outputs go under $SAV_DEEPONET_OUT (default ./runs).  The exit status is 0
only when every gated check of the command passed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .energy import Grid, write_field_csv
from .reference import ReferenceRun, cached_reference, heat_exact, parametric_heat_exact


def _run(cfg, args) -> int:
    out = Path(args.out) if args.out else harness.output_root() / cfg.experiment
    result = harness.run_experiment(cfg, out)
    print(harness.format_matrix(result, cfg))
    print(f"artifacts: {result.out_dir}  ({result.wall_time:.1f} s)")
    return 0 if result.passed else 1


def cmd_pretrain(args) -> int:
    cfg = replace(harness.load_config(args.config), n_steps=0)
    return _run(cfg, args)


def cmd_evolve(args) -> int:
    return _run(harness.load_config(args.config), args)


def cmd_reproduce(args) -> int:
    result = harness.reproduce(args.table, args.out)
    print(harness.format_matrix(result, harness.canonical_config(harness.TABLES[args.table])))
    print(f"artifacts: {result.out_dir}  ({result.wall_time:.1f} s)")
    return 0 if result.passed else 1


def cmd_oracle(args) -> int:
    heat = args.kind != "allen-cahn"
    if heat and args.dim != 1:
        raise ValueError("heat oracles are 1-D only")
    lower = args.lower if args.lower is not None else (0.0 if heat else -1.0)
    upper = args.upper if args.upper is not None else (2.0 if heat else 1.0)
    if args.dim == 1:
        grid = Grid.line(lower, upper, args.points)
    else:
        grid = Grid.square(lower, upper, args.points)
    if args.kind == "heat":
        field = heat_exact(args.a, grid.axes()[0], args.t)
    elif args.kind == "parametric-heat":
        field = parametric_heat_exact(args.a, grid.axes()[0], args.t)
    else:
        run = ReferenceRun(args.a, args.eps, grid, args.t, args.dt)
        field = cached_reference(run, harness.output_root() / "reference_cache")
    out = Path(args.out) if args.out else harness.output_root() / f"oracle_{args.kind}_a{args.a:g}_t{args.t:g}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_field_csv(out, grid, field)
    print(f"{out}  max|u| = {np.max(np.abs(field)):.6g}")
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_plots

    for path in emit_plots(args.run_dir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sav-deeponet", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("pretrain", cmd_pretrain, "fit the initial operator only"),
                               ("evolve", cmd_evolve, "pretrain and evolve one experiment")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--out", help="artifact directory")
        p.set_defaults(func=fn)

    p = sub.add_parser("reproduce", help="run a canonical table and gate it")
    p.add_argument("table", type=int, choices=sorted(harness.TABLES))
    p.add_argument("--out", help="output root (default $%s)" % harness.OUTPUT_ENV)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("oracle", help="write a reference field")
    p.add_argument("kind", choices=["heat", "parametric-heat", "allen-cahn"])
    p.add_argument("--a", type=float, default=0.3, help="amplitude a, or c for parametric-heat")
    p.add_argument("--t", type=float, default=0.04)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--dt", type=float, default=1e-5)
    p.add_argument("--dim", type=int, choices=[1, 2], default=1)
    p.add_argument("--points", type=int, default=201)
    p.add_argument("--lower", type=float, help="domain bound (default by kind)")
    p.add_argument("--upper", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plot", help="emit figure data and SVGs for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

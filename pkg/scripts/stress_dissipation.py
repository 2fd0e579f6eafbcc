"""Evolve a small pretrained model at a large multiple of the canonical dt with restarts off
and report the monotonicity of r^2 for one family."""

import argparse
import sys

import numpy as np

from sav_deeponet.deeponet import DeepONetModel, FieldSample
from sav_deeponet.harness import LADDER, canonical_config
from sav_deeponet.pretrain import TrainConfig, generate_dataset, sample_params, train_initial
from sav_deeponet.stepping import StepControlConfig, run_evolution


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("family", choices=["heat", "parametric-heat", "ac1d", "ac1d-eps"])
    ap.add_argument("--factor", type=float, default=1000.0, help="multiple of the canonical dt")
    ap.add_argument("--steps", type=int, default=400)
    args = ap.parse_args(argv)

    cfg = canonical_config(args.family)
    family, grid = cfg.family(), cfg.grid.build()
    sensors = np.linspace(cfg.grid.lower, cfg.grid.upper, 10, endpoint=False)
    params = sample_params(cfg.param_range, 6, 0)
    data = generate_dataset(family, 6, sensors, grid.points(), cfg.param_range, params=params)
    model = DeepONetModel.build(family.branch_width(len(sensors)), grid.dim, 6, (12,))
    weights, _ = train_initial(model, data, TrainConfig(max_epochs=300, target_mse=1e-8))
    samples = [FieldSample(family.branch_input(a, sensors), a) for a in params[:3]]
    problems = [family.problem(a, grid) for a in params[:3]]
    control = StepControlConfig(dt_init=args.factor * cfg.dt, restart=False)
    trace = run_evolution(model, weights, samples, grid, problems, control, args.steps,
                          reg_scale=LADDER, boundary_weight=cfg.boundary_weight).trace
    r2 = np.array([[d.r_before ** 2, d.r_after ** 2] for d in trace])
    viol = int(np.sum(r2[:, 1] > r2[:, 0] + 1e-12))
    print(f"{args.family}: {len(trace)} steps, r^2 {r2[0, 0]:.4e} -> {r2[-1, 1]:.4e}, {viol} violations")
    return 0 if viol == 0 else 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Subcommands: forward, sample, pretrain, invert, eval, export,
compare-scarce.  Exit codes: 0 success, 2 usage error, 3 I/O or format
error, 4 numerical failure.  The MFG_SEED environment variable overrides
any --seed flag.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .bilevel import BilevelConfig, bilevel_preset, run_bilevel
from .data import TrajectoryBatch, export_csv, generate_dataset, load_batch, save_batch, split
from .errors import (DataFormatError, DimensionMismatchError, MfgflowError, NumericalError,
                     SchemaError, UnknownSceneError)
from .evaluate import evaluate_run, traj_mse
from .flows import FlowStack
from .obstacle import ObstacleNet, make_grid
from .rng import stream
from .scenes import BUILTIN_SCENES, Scene, builtin_scene, load_scene
from .training import (TrainConfig, flow_preset, forward_train_preset, pretrain_mle,
                       pretrain_preset, solve_forward)


def _scene_arg(value: str, steps: int | None = None) -> Scene:
    if os.path.exists(value):
        with open(value) as fh:
            scene = load_scene(fh.read())
        if steps is not None:
            scene.steps = steps
        return scene
    return builtin_scene(value, steps=steps if steps is not None else 8)


def _model_path(value: str) -> str:
    return value if value.endswith(".bin") else os.path.join(value, "model.bin")


def _file_sha(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()[:16]


def _seed(args) -> int:
    env = os.environ.get("MFG_SEED")
    return int(env) if env else args.seed


def _cmd_forward(args) -> int:
    seed = _seed(args)
    scene = _scene_arg(args.scene, args.k)
    flow_cfg = flow_preset(args.preset, scene.d, scene.steps, seed=seed)
    train_cfg = forward_train_preset(args.preset, seed=seed)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    solve_forward(scene, flow_cfg, train_cfg, out_dir=args.out)
    print(f"forward model written to {os.path.join(args.out, 'model.bin')}")
    return 0


def _cmd_sample(args) -> int:
    seed = _seed(args)
    scene = _scene_arg(args.scene)
    path = _model_path(args.model)
    stack = FlowStack.load(path)
    scene.steps = stack.steps
    batch = generate_dataset(stack, scene, args.n, stream(seed, "sample"),
                             provenance={"generator": _file_sha(path), "seed": seed})
    if args.noise > 0:
        pts = batch.points + args.noise * stream(seed, "noise").standard_normal(batch.points.shape)
        batch = TrajectoryBatch(pts, batch.dt, dict(batch.provenance, noise=args.noise))
    save_batch(batch, args.out)
    print(f"wrote {batch.n} trajectories to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    seed = _seed(args)
    data = load_batch(args.data)
    flow_cfg = flow_preset(args.preset, data.dim, data.steps, seed=seed)
    train_cfg = pretrain_preset(args.preset, seed=seed)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    pretrain_mle(data.points, flow_cfg, train_cfg, out_dir=args.out)
    print(f"pretrained model written to {os.path.join(args.out, 'model.bin')}")
    return 0


def _cmd_invert(args) -> int:
    seed = _seed(args)
    scene = _scene_arg(args.scene)
    data = load_batch(args.data)
    init = FlowStack.load(_model_path(args.init))
    cfg = bilevel_preset(args.preset, seed=seed)
    overrides = {}
    if args.lambda_p is not None:
        overrides["lambda_p"] = args.lambda_p
    if args.lambda_m is not None:
        overrides["lambda_m"] = args.lambda_m
    if args.inner_steps is not None:
        overrides["inner_steps"] = args.inner_steps
    if args.outer_steps is not None:
        overrides["outer_steps"] = args.outer_steps
    if overrides:
        cfg = replace(cfg, **overrides)
    scene.steps = init.steps
    os.makedirs(args.out, exist_ok=True)
    run_bilevel(data, scene, init, cfg, out_dir=args.out,
                run_config={"data": os.path.abspath(args.data), "seed": seed})
    print(f"inverse run written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    scene = _scene_arg(args.scene)
    with open(os.path.join(args.run, "config.json")) as fh:
        run_cfg = json.load(fh)
    stack = FlowStack.load(os.path.join(args.run, "final", "theta.bin"))
    phi = ObstacleNet.load(os.path.join(args.run, "final", "phi.bin"))
    scene.steps = stack.steps
    train = load_batch(args.train or run_cfg.get("data"))
    test = load_batch(args.test) if args.test else None
    report = evaluate_run(phi, stack, scene, train, test, args.grid,
                          run_id=os.path.basename(os.path.normpath(args.run)))
    text = report.to_json()
    with open(os.path.join(args.run, "report.json"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


def _grid_slice_points(scene: Scene, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """2D grid over the first two axes; remaining coordinates pinned at 0."""
    grid = make_grid(scene.domain_lo[:2], scene.domain_hi[:2], resolution)
    xy = grid.points
    if scene.d == 2:
        return xy, xy
    full = np.zeros((xy.shape[0], scene.d))
    full[:, :2] = xy
    return xy, full


def _cmd_export(args) -> int:
    scene = _scene_arg(args.scene)
    if args.what == "history":
        with open(os.path.join(args.run, "history.csv")) as src, open(args.out, "w") as dst:
            dst.write(src.read())
        return 0
    if args.what == "obstacle-grid":
        phi = ObstacleNet.load(os.path.join(args.run, "final", "phi.bin"))
        xy, full = _grid_slice_points(scene, args.grid)
        est = phi.eval_np(full)
        true = scene.obstacle_true.density(full)
        with open(args.out, "w") as fh:
            fh.write("x,y,b_est,b_true\n")
            for row, e, t in zip(xy, est, true):
                fh.write(f"{float(row[0])!r},{float(row[1])!r},{float(e)!r},{float(t)!r}\n")
        return 0
    if args.what == "trajectories":
        with open(os.path.join(args.run, "config.json")) as fh:
            run_cfg = json.load(fh)
        data = load_batch(args.data or run_cfg.get("data"))
        stack = FlowStack.load(os.path.join(args.run, "final", "theta.bin"))
        n = min(args.n, data.n)
        observed = data.points[:n]
        predicted, _ = stack.forward_np(observed[:, 0])
        with open(args.out, "w") as fh:
            cols = ",".join(f"x_{j + 1}" for j in range(data.dim))
            fh.write(f"n,k,t,{cols},series\n")
            for name, pts in (("observed", observed), ("predicted", predicted)):
                for i in range(n):
                    for k in range(data.steps + 1):
                        coords = ",".join(repr(float(v)) for v in pts[i, k])
                        fh.write(f"{i},{k},{float(k * data.dt)!r},{coords},{name}\n")
        return 0
    raise ValueError(f"unknown export kind {args.what!r}")


def _cmd_compare_scarce(args) -> int:
    seed = _seed(args)
    scene = _scene_arg(args.scene)
    data = load_batch(args.data)
    sizes = [int(s) for s in args.sizes.split(",")]
    perm = stream(seed, "scarce-split").permutation(data.n)
    test_n = min(1000, data.n // 4)
    pool_idx, test_idx = perm[:data.n - test_n], perm[data.n - test_n:]
    test = data.subset(test_idx)
    scene.steps = data.steps

    rows = []
    for size in sizes:
        if size > len(pool_idx):
            raise ValueError(f"size {size} exceeds training pool {len(pool_idx)}")
        train = data.subset(pool_idx[:size])
        flow_cfg = flow_preset("desk", data.dim, data.steps, seed=seed)
        pre_cfg = replace(pretrain_preset("desk", seed=seed), steps=args.pretrain_steps)
        theta0 = pretrain_mle(train.points, flow_cfg, pre_cfg)

        naive_cfg = replace(bilevel_preset("desk", seed=seed), lambda_p=0.0, lambda_m=0.0,
                            outer_steps=args.outer_steps, checkpoint_every=0)
        naive_theta, _, _ = run_bilevel(train, scene, theta0, naive_cfg)

        blo_cfg = replace(bilevel_preset("desk", seed=seed),
                          outer_steps=args.outer_steps, checkpoint_every=0)
        blo_theta, _, _ = run_bilevel(train, scene, theta0, blo_cfg)

        row = [size,
               traj_mse(naive_theta, train), traj_mse(naive_theta, test),
               traj_mse(blo_theta, train), traj_mse(blo_theta, test)]
        rows.append(row)
        print(f"size {size}: naive test MSE {row[2]:.5g}, penalty test MSE {row[4]:.5g}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_train", "naive_train_mse", "naive_test_mse",
                         "blo_train_mse", "blo_test_mse"])
        writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgflow",
        description="Forward mean-field-game solves with invertible flows and "
                    "obstacle recovery from trajectories")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="solve the forward game against the true obstacle")
    p.add_argument("--scene", required=True, help=f"builtin ({', '.join(BUILTIN_SCENES)}) or JSON path")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None, help="override optimizer steps")
    p.add_argument("--k", type=int, default=None, help="override time steps")
    p.set_defaults(func=_cmd_forward)

    p = sub.add_parser("sample", help="sample trajectories from a solved model")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0,
                   help="observation noise std added to sampled points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("pretrain", help="fit trajectories by MLE as the inverse initialization")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("invert", help="recover the obstacle from trajectories")
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--init", required=True, help="pretrained model directory")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--lambda-p", type=float, default=None)
    p.add_argument("--lambda-m", type=float, default=None)
    p.add_argument("--inner-steps", type=int, default=None)
    p.add_argument("--outer-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("eval", help="report obstacle error and trajectory MSE for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--train", default=None, help="training data (defaults to the run's)")
    p.add_argument("--test", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export", help="write plot-ready CSVs from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--what", choices=("obstacle-grid", "trajectories", "history"), required=True)
    p.add_argument("--format", choices=("csv",), default="csv")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--n", type=int, default=200, help="trajectories to export")
    p.add_argument("--data", default=None)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("compare-scarce", help="naive vs penalty training across data sizes")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sizes", default="3000,300,100,50")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outer-steps", type=int, default=600)
    p.add_argument("--pretrain-steps", type=int, default=800)
    p.set_defaults(func=_cmd_compare_scarce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except (UnknownSceneError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, DataFormatError, SchemaError, DimensionMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, MfgflowError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Recovery and generalization metrics.

The obstacle error is a discrete relative L2 over the scene's domain box:
root-sum-squares of the pointwise difference over root-sum-squares of the
truth (any grid measure factor cancels in the ratio).  Dimensions above 3
use scrambled low-discrepancy points instead of a tensor grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import qmc

from .data import TrajectoryBatch
from .errors import DimensionMismatchError
from .flows import FlowStack
from .obstacle import field_values, make_grid
from .rng import stream
from .scenes import Scene

QMC_METRIC_POINTS = 8192
GRID_METRIC_MAX_DIM = 3


def metric_points(scene: Scene, resolution: int, seed: int = 0) -> tuple[np.ndarray, str]:
    """Evaluation points over the domain box and the sampling kind used."""
    if scene.d <= GRID_METRIC_MAX_DIM:
        grid = make_grid(scene.domain_lo, scene.domain_hi, resolution)
        return grid.points, "grid"
    sob = qmc.Sobol(scene.d, scramble=True, seed=stream(seed, "qmc-metric"))
    unit = sob.random(QMC_METRIC_POINTS)
    span = scene.domain_hi - scene.domain_lo
    return scene.domain_lo + unit * span, "qmc"


def obstacle_rel_l2(estimate, scene: Scene, resolution: int = 100, seed: int = 0) -> float:
    """|| B_est - B_true ||_2 / || B_true ||_2 over points in the domain."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    pts, _ = metric_points(scene, resolution, seed)
    est = field_values(estimate, pts)
    true = scene.obstacle_true.density(pts)
    return float(np.linalg.norm(est - true) / np.linalg.norm(true))


def traj_mse(stack: FlowStack, batch: TrajectoryBatch) -> float:
    """Mean squared prefix-map error on observed paths (evaluation mode)."""
    if batch.steps != stack.steps or batch.dim != stack.dim:
        raise DimensionMismatchError(
            f"data has K={batch.steps}, d={batch.dim}; stack has K={stack.steps}, d={stack.dim}")
    if batch.n == 0:
        return 0.0
    path, _ = stack.forward_np(batch.points[:, 0])
    acc = 0.0
    for j in range(1, batch.steps + 1):
        acc += float(np.sum(np.square(path[:, j] - batch.points[:, j])))
    return acc / (batch.steps * batch.n)


@dataclass
class EvalReport:
    report_version: int
    scene: str
    run_id: str
    obstacle_rel_l2: float
    traj_mse_train: float
    traj_mse_test: float | None
    grid_resolution: int
    metric_kind: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_run(estimate, stack: FlowStack, scene: Scene, train: TrajectoryBatch,
                 test: TrajectoryBatch | None, resolution: int, run_id: str,
                 seed: int = 0) -> EvalReport:
    pts_kind = "grid" if scene.d <= GRID_METRIC_MAX_DIM else "qmc"
    return EvalReport(
        report_version=1,
        scene=scene.name,
        run_id=run_id,
        obstacle_rel_l2=obstacle_rel_l2(estimate, scene, resolution, seed),
        traj_mse_train=traj_mse(stack, train),
        traj_mse_test=traj_mse(stack, test) if test is not None else None,
        grid_resolution=resolution,
        metric_kind=pts_kind,
    )

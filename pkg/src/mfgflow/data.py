"""Trajectory datasets: generation from a solved flow, persistence, splits.

File format MFGTRAJ1: one JSON header line
{"magic": "MFGTRAJ1", "N": ..., "K": ..., "d": ..., "dt": ..., "provenance": ...}
followed by a newline and the little-endian float64 payload, row-major
over (sample, time index, coordinate).  Files are written atomically.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .flows import FlowStack
from .scenes import Scene

MAGIC = "MFGTRAJ1"


@dataclass
class TrajectoryBatch:
    """N sampled paths at K+1 regular time points (t_0 = 0 included)."""

    points: np.ndarray                  # (N, K+1, d)
    dt: float
    provenance: dict | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 3:
            raise DataFormatError(f"points must be (N, K+1, d), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise DataFormatError("trajectory points must all be finite")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def steps(self) -> int:
        return self.points.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.points.shape[2]

    def subset(self, idx) -> "TrajectoryBatch":
        return TrajectoryBatch(self.points[idx], self.dt, self.provenance)


def generate_dataset(stack: FlowStack, scene: Scene, n: int, rng: np.random.Generator,
                     provenance: dict | None = None) -> TrajectoryBatch:
    """Sample n starts from the scene's initial law and roll the stack forward."""
    if n == 0:
        points = np.zeros((0, stack.steps + 1, stack.dim))
    else:
        x0 = scene.p0.sample(rng, n)
        points, _ = stack.forward_np(x0)
    prov = {"scene": scene.name}
    if provenance:
        prov.update(provenance)
    return TrajectoryBatch(points, dt=1.0 / max(stack.steps, 1), provenance=prov)


def save_batch(batch: TrajectoryBatch, path: str) -> None:
    header = {"magic": MAGIC, "N": batch.n, "K": batch.steps, "d": batch.dim,
              "dt": batch.dt, "provenance": batch.provenance}
    blob = json.dumps(header).encode("utf-8") + b"\n"
    blob += np.ascontiguousarray(batch.points, dtype="<f8").tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_batch(path: str) -> TrajectoryBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: bad header ({e})") from None
    if header.get("magic") != MAGIC:
        raise DataFormatError(f"{path}: bad magic {header.get('magic')!r} (expected {MAGIC})")
    n, k, d = int(header["N"]), int(header["K"]), int(header["d"])
    payload = raw[nl + 1:]
    expected = n * (k + 1) * d * 8
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload holds {len(payload)} bytes, header expects {expected}")
    points = np.frombuffer(payload, dtype="<f8").reshape(n, k + 1, d).copy()
    return TrajectoryBatch(points, dt=float(header["dt"]), provenance=header.get("provenance"))


def split(batch: TrajectoryBatch, n_train: int,
          rng: np.random.Generator) -> tuple[TrajectoryBatch, TrajectoryBatch]:
    """Disjoint train/test split; test gets the remainder."""
    if n_train > batch.n:
        raise ValueError(f"n_train={n_train} exceeds dataset size {batch.n}")
    perm = rng.permutation(batch.n)
    return batch.subset(perm[:n_train]), batch.subset(perm[n_train:])


def export_csv(batch: TrajectoryBatch, path: str) -> None:
    """One row per (sample, time index): n, k, t, x_1..x_d."""
    with open(path, "w") as fh:
        cols = ",".join(f"x_{j + 1}" for j in range(batch.dim))
        fh.write(f"n,k,t,{cols}\n")
        for i in range(batch.n):
            for k in range(batch.steps + 1):
                coords = ",".join(repr(float(v)) for v in batch.points[i, k])
                fh.write(f"{i},{k},{float(k * batch.dt)!r},{coords}\n")

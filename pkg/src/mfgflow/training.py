"""Optimization machinery: Adam, LR decay, forward solves, MLE pretraining.

All stochasticity is drawn from per-step streams derived from the config
seed, so runs are bit-reproducible and checkpointed runs resume exactly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import NumericalError
from .flows import FlowConfig, FlowStack
from .kernels import backend as K
from .objectives import mfg_loss, trajectory_fit_loss
from .rng import stream
from .scenes import Scene


@dataclass
class LRSchedule:
    """Stepwise exponential decay: lr(step) = lr0 * decay^(step // interval)."""

    decay: float = 0.8
    interval: int = 1000

    def at(self, lr0: float, step: int) -> float:
        return lr0 * self.decay ** (step // self.interval)


class Adam:
    """Standard Adam with bias correction; state is per-parameter moments."""

    def __init__(self, params, lr: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {p.id: np.zeros_like(p.value) for p in self.params}
        self.v = {p.id: np.zeros_like(p.value) for p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            elif np.isnan(g).any():
                raise NumericalError(f"NaN gradient for parameter {p.id!r}")
            K.adam_update(p.value, g, self.m[p.id], self.v[p.id],
                          self.t, lr, self.b1, self.b2, self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for p in self.params:
            out[f"{prefix}.m.{p.id}"] = self.m[p.id]
            out[f"{prefix}.v.{p.id}"] = self.v[p.id]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for p in self.params:
            self.m[p.id][...] = arrays[f"{prefix}.m.{p.id}"]
            self.v[p.id][...] = arrays[f"{prefix}.v.{p.id}"]


def adam_step(opt: Adam, lr: float | None = None) -> None:
    """Apply one update from the gradients accumulated on opt's parameters."""
    opt.step(lr)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def clip_global_norm(params, max_norm: float | None) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.reshape(-1), p.grad.reshape(-1)))
    norm = float(np.sqrt(total))
    if max_norm is not None and norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainConfig:
    steps: int
    batch_p0: int = 1024
    batch_p1: int = 1024
    fit_batch: int = 512
    lr: float = 1e-3
    seed: int = 0
    schedule: bool = True
    decay: float = 0.8
    interval: int = 1000
    clip_norm: float | None = 10.0
    checkpoint_every: int = 0
    plateau: bool = False          # stop when the loss EMA stops improving
    plateau_window: int = 500
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.steps < 0 or min(self.batch_p0, self.batch_p1, self.fit_batch) <= 0:
            raise ValueError("steps must be >= 0 and batch sizes positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def lr_at(self, step: int) -> float:
        if not self.schedule:
            return self.lr
        return LRSchedule(self.decay, self.interval).at(self.lr, step)


LOG_COLUMNS = ["step", "transport", "interaction", "fwd_kl", "rev_kl", "total"]


def write_log_csv(path: str, rows: list[list[float]], columns=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns or LOG_COLUMNS)
        writer.writerows(rows)


def fit_batch_indices(n_data: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Minibatch index choice shared by MLE pretraining and the outer loop."""
    if n_data <= batch:
        return np.arange(n_data)
    return stream(seed, "fit", step).choice(n_data, size=batch, replace=False)


def _save_train_state(path, kind, params, opt, cfg, seed, step):
    extra = opt.state_arrays("adam")
    extra["train.step"] = np.array([float(step)])
    ad.save_checkpoint(path, kind, params, seed=seed, config=cfg, extra_arrays=extra)


def solve_forward(scene: Scene, flow_cfg: FlowConfig, train_cfg: TrainConfig,
                  out_dir: str | None = None,
                  resume_from: str | None = None) -> tuple[FlowStack, list[list[float]]]:
    """Minimize the lower-level loss against the scene's true obstacle.

    Returns the trained stack and the per-step loss log.  With ``out_dir``
    set, writes config.json, training_log.csv, periodic train-state
    checkpoints, and the final model.
    """
    stack = FlowStack(flow_cfg)
    opt = Adam(stack.parameters(), train_cfg.lr)
    start_step = 0
    if resume_from is not None:
        manifest, arrays = ad.load_checkpoint(resume_from)
        for p in stack.parameters():
            p.value[...] = arrays[p.id]
        opt.load_state_arrays("adam", arrays)
        start_step = int(arrays["train.step"][0])
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump({"kind": "forward", "scene": scene.name,
                       "flow": asdict(flow_cfg), "train": asdict(train_cfg)}, fh, indent=2)

    params = stack.parameters()
    rows: list[list[float]] = []
    ema, ema_hist = None, []
    seed = train_cfg.seed
    for step in range(start_step, train_cfg.steps):
        x0 = scene.p0.sample(stream(seed, "p0", step), train_cfg.batch_p0)
        y1 = scene.p1.sample(stream(seed, "p1", step), train_cfg.batch_p1)
        drop = stream(seed, "dropout", step)
        zero_grads(params)
        try:
            total, bd = mfg_loss(stack, scene.obstacle_true, scene, x0, y1,
                                 train=True, rng=drop)
            ad.backward(total, params)
        except NumericalError:
            if out_dir is not None:
                stack.save(os.path.join(out_dir, "diverged.bin"), seed=seed)
            raise
        clip_global_norm(params, train_cfg.clip_norm)
        opt.step(train_cfg.lr_at(step))
        rows.append([step, *bd.as_row()])
        ema = bd.total if ema is None else 0.98 * ema + 0.02 * bd.total
        ema_hist.append(ema)
        if (out_dir is not None and train_cfg.checkpoint_every
                and (step + 1) % train_cfg.checkpoint_every == 0):
            _save_train_state(os.path.join(out_dir, "checkpoints", f"{step + 1}.bin"),
                              "flow_train_state", params, opt, asdict(flow_cfg), seed, step + 1)
        if (train_cfg.plateau and len(ema_hist) > train_cfg.plateau_window
                and ema_hist[-train_cfg.plateau_window - 1] - ema < train_cfg.plateau_tol):
            break
    if out_dir is not None:
        stack.save(os.path.join(out_dir, "model.bin"), seed=seed)
        write_log_csv(os.path.join(out_dir, "training_log.csv"), rows)
    return stack, rows


def pretrain_mle(points: np.ndarray, flow_cfg: FlowConfig, train_cfg: TrainConfig,
                 init_stack: FlowStack | None = None,
                 out_dir: str | None = None) -> FlowStack:
    """Minimize the trajectory-fit loss alone; the bilevel initialization."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        raise ValueError("pretraining requires a nonempty dataset")
    stack = init_stack if init_stack is not None else FlowStack(flow_cfg)
    params = stack.parameters()
    opt = Adam(params, train_cfg.lr)
    seed = train_cfg.seed
    for step in range(train_cfg.steps):
        idx = fit_batch_indices(points.shape[0], train_cfg.fit_batch, seed, step)
        zero_grads(params)
        loss = trajectory_fit_loss(stack, points[idx], train=True,
                                   rng=stream(seed, "dropout", step))
        ad.backward(loss, params)
        clip_global_norm(params, train_cfg.clip_norm)
        opt.step(train_cfg.lr_at(step))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        stack.save(os.path.join(out_dir, "model.bin"), seed=seed)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump({"kind": "pretrain", "flow": asdict(flow_cfg),
                       "train": asdict(train_cfg)}, fh, indent=2)
    return stack


# -- presets -------------------------------------------------------------------

def flow_preset(preset: str, d: int, steps: int, seed: int = 0) -> FlowConfig:
    if preset == "desk":
        return FlowConfig(dim=d, steps=steps, transform="affine", width=64,
                          dropout=0.0, seed=seed)
    if preset == "paper":
        return FlowConfig(dim=d, steps=steps, transform="rqs", width=256,
                          dropout=0.25, spline_bins=8, seed=seed)
    raise ValueError(f"unknown preset {preset!r}")


def forward_train_preset(preset: str, seed: int = 0) -> TrainConfig:
    if preset == "desk":
        return TrainConfig(steps=3000, batch_p0=512, batch_p1=512, lr=1e-3, seed=seed)
    if preset == "paper":
        return TrainConfig(steps=30000, batch_p0=1024, batch_p1=1024, lr=1e-3,
                           seed=seed, plateau=True)
    raise ValueError(f"unknown preset {preset!r}")


def pretrain_preset(preset: str, seed: int = 0) -> TrainConfig:
    if preset == "desk":
        return TrainConfig(steps=2000, fit_batch=512, lr=1e-3, seed=seed)
    if preset == "paper":
        return TrainConfig(steps=20000, fit_batch=512, lr=1e-3, seed=seed)
    raise ValueError(f"unknown preset {preset!r}")

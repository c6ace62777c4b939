"""Trainable obstacle field and grid evaluation helpers.

The obstacle is a small fully-connected network with residual hidden
connections and an exponential output, so its value is strictly positive
everywhere.  The final pre-exponential layer starts at zero, i.e. a fresh
network is the constant field 1, a neutral prior under mass matching.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import NumericalError
from .flows import _ACTIVATIONS, _act_np
from .rng import stream
from .scenes import GaussianMixtureField

GRID_POINT_CAP = 10_000_000
_EVAL_CHUNK = 65536


@dataclass
class ObstacleConfig:
    dim: int
    width: int = 128
    activation: str = "relu"
    seed: int = 0


class ObstacleNet:
    """Positive scalar field: exp(linear(h3)) over three width-`w` layers.

    The first layer projects input to the hidden width; the two following
    layers are residual (x -> x + act(Wx + b)).
    """

    def __init__(self, cfg: ObstacleConfig):
        self.cfg = cfg
        self.dim = cfg.dim
        self.activation = cfg.activation
        if cfg.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {cfg.activation!r}")
        rng = stream(cfg.seed, "obstacle-init")
        w = cfg.width

        def he(dout, din):
            return rng.normal(0.0, np.sqrt(2.0 / din), (dout, din))

        self.w1 = Parameter("obs.w1", he(w, cfg.dim))
        self.b1 = Parameter("obs.b1", np.zeros(w))
        self.w2 = Parameter("obs.w2", he(w, w))
        self.b2 = Parameter("obs.b2", np.zeros(w))
        self.w3 = Parameter("obs.w3", he(w, w))
        self.b3 = Parameter("obs.b3", np.zeros(w))
        self.w_out = Parameter("obs.w_out", np.zeros((1, w)))
        self.b_out = Parameter("obs.b_out", np.zeros(1))
        self._params = [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3,
                        self.w_out, self.b_out]

    def parameters(self) -> list[Parameter]:
        return self._params

    def set_requires_grad(self, flag: bool) -> None:
        for p in self._params:
            p.requires_grad = flag

    def eval_nodes(self, x: Node) -> Node:
        act = _ACTIVATIONS[self.activation]
        h = act(ad.linear(x, self.w1.node(), self.b1.node()))
        h = ad.add(h, act(ad.linear(h, self.w2.node(), self.b2.node())))
        h = ad.add(h, act(ad.linear(h, self.w3.node(), self.b3.node())))
        pre = ad.reshape(ad.linear(h, self.w_out.node(), self.b_out.node()), (x.value.shape[0],))
        if pre.value.max(initial=-np.inf) > 700.0:
            raise NumericalError(
                "obstacle pre-exponential output exceeds 700; reduce weight scale or learning rate")
        return ad.exp(pre)

    def eval_np(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(x.shape[0])
        for lo in range(0, x.shape[0], _EVAL_CHUNK):
            xc = x[lo:lo + _EVAL_CHUNK]
            h = _act_np(self.activation, xc @ self.w1.value.T + self.b1.value)
            h = h + _act_np(self.activation, h @ self.w2.value.T + self.b2.value)
            h = h + _act_np(self.activation, h @ self.w3.value.T + self.b3.value)
            pre = (h @ self.w_out.value.T + self.b_out.value)[:, 0]
            if pre.max(initial=-np.inf) > 700.0:
                raise NumericalError(
                    "obstacle pre-exponential output exceeds 700; reduce weight scale or learning rate")
            out[lo:lo + _EVAL_CHUNK] = np.exp(pre)
        return out

    def save(self, path: str, seed: int | None = None) -> None:
        ad.save_checkpoint(path, "obstacle_net", self._params, seed=seed,
                           config=asdict(self.cfg))

    @classmethod
    def load(cls, path: str) -> "ObstacleNet":
        manifest, arrays = ad.load_checkpoint(path)
        net = cls(ObstacleConfig(**manifest["config"]))
        for p in net.parameters():
            p.value[...] = arrays[p.id]
        return net


def obstacle_eval(net: ObstacleNet, x: Node) -> Node:
    """Differentiable obstacle values at points x (gradients in weights and x)."""
    return net.eval_nodes(x)


def field_values(field, x: np.ndarray) -> np.ndarray:
    """Evaluate any obstacle-like field (net, mixture, or callable) at points."""
    if isinstance(field, ObstacleNet):
        return field.eval_np(x)
    if isinstance(field, GaussianMixtureField):
        return field.density(x)
    return np.asarray(field(x), dtype=np.float64)


@dataclass
class Grid:
    lo: np.ndarray
    hi: np.ndarray
    shape: tuple[int, ...]
    axes: list[np.ndarray]

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


def make_grid(lo, hi, resolution) -> Grid:
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    res = np.broadcast_to(np.asarray(resolution, dtype=int), lo.shape)
    if np.any(res < 2):
        raise ValueError(f"grid needs at least 2 points per axis, got {res.tolist()}")
    total = int(np.prod(res.astype(np.float64)))
    if total > GRID_POINT_CAP:
        raise ValueError(
            f"grid would hold {total} points (cap {GRID_POINT_CAP}); "
            "use Monte-Carlo mass estimation instead")
    axes = [np.linspace(lo[j], hi[j], res[j]) for j in range(len(lo))]
    return Grid(lo=lo, hi=hi, shape=tuple(int(r) for r in res), axes=axes)


def field_on_grid(field, lo, hi, resolution) -> tuple[np.ndarray, Grid]:
    """Row-major field values over a tensor grid including both endpoints."""
    grid = make_grid(lo, hi, resolution)
    return field_values(field, grid.points), grid

"""Loss terms for the forward game and the trajectory-fit objective.

The lower-level loss of a stack theta against an obstacle B is

    L(theta; B) = lam_L * (K/M) * sum_{m,k<K} ||F_{k+1}(x^m) - F_k(x^m)||^2
                + lam_I * (1/(K M)) * sum_{m,k<K} B(F_k(x^m))
                + lam_D * (KL(F_K# P0 || P1) + KL(P1 || F_K# P0))

with x^m drawn from P0 and the symmetrized KL estimated by Monte Carlo:
the forward term reuses the forward pass (log density of the pushforward
at F_K(x) is log p0(x) minus the accumulated log-determinants), the
reverse term runs an inverse pass on samples from P1.

The upper-level (trajectory fit) loss is the mean squared deviation of
the prefix maps from observed positions, (1/(K N)) sum ||F_k(x_0) - x_k||^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import DimensionMismatchError, NumericalError
from .flows import FlowStack
from .obstacle import ObstacleNet
from .scenes import GaussianMixtureField, Scene


@dataclass
class LossBreakdown:
    """Unweighted term values; ``total`` applies the scene's weights."""

    transport: float
    interaction: float
    terminal_fwd_kl: float
    terminal_rev_kl: float
    total: float

    def as_row(self) -> list[float]:
        return [self.transport, self.interaction, self.terminal_fwd_kl,
                self.terminal_rev_kl, self.total]


def _field_nodes(obstacle, x: Node) -> Node:
    if hasattr(obstacle, "eval_nodes"):
        return obstacle.eval_nodes(x)
    if hasattr(obstacle, "density_nodes"):
        return obstacle.density_nodes(x)
    raise TypeError(f"unsupported obstacle type {type(obstacle).__name__}")


def transport_cost(stack: FlowStack, x0: np.ndarray, train=False, rng=None) -> Node:
    """(K/M) * sum of squared step displacements along the flow path."""
    path, _ = stack.path_nodes(ad.constant(x0), train=train, rng=rng)
    return _transport_from_path(path, stack.steps, x0.shape[0])


def _transport_from_path(path: list[Node], steps: int, m: int) -> Node:
    """(K/M) * sum_k ||path_{k+1} - path_k||^2 as one node over all slices."""
    if steps == 0:
        return ad.constant(0.0)
    diffs = [path[k + 1].value - path[k].value for k in range(steps)]
    val = np.array(sum(float(np.sum(d * d)) for d in diffs))

    def vjp(g):
        grads = [None] * (steps + 1)
        for k, d in enumerate(diffs):
            pull = (2.0 * float(g)) * d
            grads[k] = -pull if grads[k] is None else grads[k] - pull
            grads[k + 1] = pull
        return tuple(grads)

    node = ad.make_node(val, "path_transport", tuple(path), vjp)
    return ad.mul(node, steps / m)


def interaction_cost(stack: FlowStack, obstacle, x0: np.ndarray, train=False, rng=None) -> Node:
    """Mean obstacle value over path nodes k = 0..K-1 (terminal excluded)."""
    path, _ = stack.path_nodes(ad.constant(x0), train=train, rng=rng)
    return _interaction_from_path(path, obstacle, stack.steps, x0.shape[0])


def _interaction_from_path(path: list[Node], obstacle, steps: int, m: int) -> Node:
    if steps == 0:
        return ad.constant(0.0)
    pts = ad.concat(path[:steps], axis=0) if steps > 1 else path[0]
    vals = _field_nodes(obstacle, pts)
    return ad.mul(ad.nsum(vals), 1.0 / (steps * m))


def terminal_jeffreys(stack: FlowStack, scene: Scene, x0: np.ndarray, y1: np.ndarray,
                      train=False, rng=None) -> tuple[Node, Node]:
    """Monte-Carlo forward and reverse KL between the pushforward and P1."""
    path, logdets = stack.path_nodes(ad.constant(x0), train=train, rng=rng)
    fwd = _fwd_kl_from_path(path, logdets, scene, x0)
    rev = _rev_kl(stack, scene, y1)
    return fwd, rev


def _fwd_kl_from_path(path: list[Node], logdets: list[Node], scene: Scene,
                      x0: np.ndarray) -> Node:
    logp0 = scene.p0.logdensity(x0)
    if not np.isfinite(logp0).all():
        raise NumericalError("non-finite initial log density in forward KL")
    acc = ad.constant(logp0)
    for ld in logdets:
        acc = ad.sub(acc, ld)
    logp1 = scene.p1.logdensity_nodes(path[-1])
    if not np.isfinite(logp1.value).all():
        raise NumericalError("non-finite terminal log density in forward KL")
    return ad.nmean(ad.sub(acc, logp1))


def _rev_kl(stack: FlowStack, scene: Scene, y1: np.ndarray) -> Node:
    logp1 = scene.p1.logdensity(y1)
    x0_rec, ld_inv = stack.inverse_nodes(ad.constant(y1))
    logpush = ad.add(scene.p0.logdensity_nodes(x0_rec), ld_inv)
    if not (np.isfinite(logp1).all() and np.isfinite(logpush.value).all()):
        raise NumericalError("non-finite log density in reverse KL")
    return ad.nmean(ad.sub(ad.constant(logp1), logpush))


def mfg_loss(stack: FlowStack, obstacle, scene: Scene, x0: np.ndarray, y1: np.ndarray,
             train=False, rng=None) -> tuple[Node, LossBreakdown]:
    """Weighted lower-level loss; also returns the unweighted term values."""
    return _mfg_loss_impl(stack, obstacle, scene, x0, y1, train, rng, freeze_flow=False)


def mfg_loss_frozen_flow(stack: FlowStack, obstacle: ObstacleNet, scene: Scene,
                         x0: np.ndarray, y1: np.ndarray) -> tuple[Node, LossBreakdown]:
    """Same arithmetic as ``mfg_loss`` with the flow treated as a constant.

    Only the obstacle network keeps gradients (the value-function gradient
    of the penalty objective needs d/d(phi) at a fixed minimizer, and only
    the interaction term involves the obstacle).  For equal inputs and
    parameters the returned value is bit-identical to ``mfg_loss``.
    """
    return _mfg_loss_impl(stack, obstacle, scene, x0, y1, False, None, freeze_flow=True)


def _mfg_loss_impl(stack, obstacle, scene, x0, y1, train, rng, freeze_flow):
    lam_l, lam_i, lam_d = scene.lambdas
    m = x0.shape[0]
    if freeze_flow:
        with ad.no_grad():
            path, logdets = stack.path_nodes(ad.constant(x0))
            transport = _transport_from_path(path, stack.steps, m)
            fwd = _fwd_kl_from_path(path, logdets, scene, x0) if lam_d > 0 else ad.constant(0.0)
            rev = _rev_kl(stack, scene, y1) if lam_d > 0 else ad.constant(0.0)
        path = [ad.constant(p.value) for p in path]
        transport = ad.constant(transport.value)
        fwd, rev = ad.constant(fwd.value), ad.constant(rev.value)
    else:
        path, logdets = stack.path_nodes(ad.constant(x0), train=train, rng=rng)
        transport = _transport_from_path(path, stack.steps, m)
        if lam_d > 0:
            fwd = _fwd_kl_from_path(path, logdets, scene, x0)
            rev = _rev_kl(stack, scene, y1)
        else:
            fwd, rev = ad.constant(0.0), ad.constant(0.0)
    if lam_i > 0:
        interaction = _interaction_from_path(path, obstacle, stack.steps, m)
    else:
        interaction = ad.constant(0.0)
    total = ad.add(ad.add(ad.mul(transport, lam_l), ad.mul(interaction, lam_i)),
                   ad.mul(ad.add(fwd, rev), lam_d))
    breakdown = LossBreakdown(float(transport.value), float(interaction.value),
                              float(fwd.value), float(rev.value), float(total.value))
    if not np.isfinite(breakdown.total):
        raise NumericalError(f"non-finite MFG loss: {breakdown}")
    return total, breakdown


def trajectory_fit_loss(stack: FlowStack, points: np.ndarray, train=False, rng=None) -> Node:
    """(1/(K N)) * sum_{n,k>=1} ||F_k(x^n_0) - x^n_k||^2 on (N, K+1, d) points."""
    points = np.asarray(points, dtype=np.float64)
    n, kp1, d = points.shape
    k = kp1 - 1
    if k != stack.steps or d != stack.dim:
        raise DimensionMismatchError(
            f"data has K={k}, d={d}; stack has K={stack.steps}, d={stack.dim}")
    path, _ = stack.path_nodes(ad.constant(points[:, 0]), train=train, rng=rng)
    diffs = [path[j].value - points[:, j] for j in range(1, kp1)]
    val = np.array(sum(float(np.sum(d * d)) for d in diffs))

    def vjp(g):
        scale = 2.0 * float(g)
        return tuple(scale * d for d in diffs)

    node = ad.make_node(val, "traj_fit", tuple(path[1:]), vjp)
    return ad.mul(node, 1.0 / (k * n))

"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every primitive builds a ``Node`` holding its value, its
parent nodes, and the vector-Jacobian products needed for the backward
pass.  The graph is rebuilt on every evaluation and dropped afterwards,
so loops whose shape changes between steps (dropout masks, varying batch
sizes) need no special handling.  Gradients are exact to roundoff; there
is no support for higher-order derivatives.

Conventions:
  * everything is float64;
  * ReLU' (and therefore the hinge derivative) at 0 is 0;
  * a ``Parameter`` accumulates gradients additively until ``zero_grad``.
"""

from __future__ import annotations

import heapq
import json
import os
import tempfile
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataFormatError, ShapeMismatchError
from .kernels import backend as K

_GRAD_ENABLED = True
_next_seq = __import__("itertools").count().__next__


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One entry of the differentiable computation record.

    ``vjps`` is either a tuple of per-parent callables (g -> grad), with
    None for parents that need no gradient, or a single callable
    returning a tuple of gradients for all parents at once (used by
    fused primitives whose backward shares work).  ``seq`` is the
    creation index; parents always precede children, which is what the
    backward pass sorts by.
    """

    __slots__ = ("value", "op", "parents", "vjps", "requires_grad", "param", "seq")

    def __init__(self, value, op="const", parents=(), vjps=(), requires_grad=False, param=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.param = param
        self.seq = _next_seq()

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # arithmetic sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named trainable array.  Ids must be unique within a model."""

    __slots__ = ("id", "value", "requires_grad", "grad")

    def __init__(self, pid: str, value: np.ndarray, requires_grad: bool = True):
        self.id = pid
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    def node(self) -> Node:
        req = _GRAD_ENABLED and self.requires_grad
        return Node(self.value, "param", requires_grad=req, param=self)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g.reshape(self.value.shape))
        else:
            self.grad += g.reshape(self.value.shape)


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _track(*nodes: Node) -> bool:
    return _GRAD_ENABLED and any(n.requires_grad for n in nodes)


def make_node(value: np.ndarray, op: str, parents: tuple, vjps) -> Node:
    """Assemble a custom primitive node (used by fused layer kernels)."""
    if _track(*parents):
        return Node(value, op, parents, vjps, True)
    return Node(value, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Node, b: Node):
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.value.shape, b.value.shape) from None


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)
    val = a.value + b.value
    if _track(a, b):
        return Node(val, "add", (a, b),
                    (lambda g: _unbroadcast(g, a.value.shape),
                     lambda g: _unbroadcast(g, b.value.shape)), True)
    return Node(val, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)
    val = a.value - b.value
    if _track(a, b):
        return Node(val, "sub", (a, b),
                    (lambda g: _unbroadcast(g, a.value.shape),
                     lambda g: _unbroadcast(-g, b.value.shape)), True)
    return Node(val, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)
    val = a.value * b.value
    if _track(a, b):
        return Node(val, "mul", (a, b),
                    (lambda g: _unbroadcast(g * b.value, a.value.shape),
                     lambda g: _unbroadcast(g * a.value, b.value.shape)), True)
    return Node(val, "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a, b)
    val = a.value / b.value
    if _track(a, b):
        return Node(val, "div", (a, b),
                    (lambda g: _unbroadcast(g / b.value, a.value.shape),
                     lambda g: _unbroadcast(-g * val / b.value, b.value.shape)), True)
    return Node(val, "div")


def neg(a) -> Node:
    a = as_node(a)
    if _track(a):
        return Node(-a.value, "neg", (a,), (lambda g: -g,), True)
    return Node(-a.value, "neg")


def square(a) -> Node:
    a = as_node(a)
    val = a.value * a.value
    if _track(a):
        return Node(val, "square", (a,), (lambda g: 2.0 * g * a.value,), True)
    return Node(val, "square")


# -- transcendental ------------------------------------------------------------

def exp(a) -> Node:
    a = as_node(a)
    val = np.exp(a.value)
    if _track(a):
        return Node(val, "exp", (a,), (lambda g: g * val,), True)
    return Node(val, "exp")


def log(a) -> Node:
    a = as_node(a)
    val = np.log(a.value)
    if _track(a):
        return Node(val, "log", (a,), (lambda g: g / a.value,), True)
    return Node(val, "log")


def sqrt(a) -> Node:
    a = as_node(a)
    val = np.sqrt(a.value)
    if _track(a):
        return Node(val, "sqrt", (a,), (lambda g: 0.5 * g / val,), True)
    return Node(val, "sqrt")


def tanh(a) -> Node:
    a = as_node(a)
    val = np.tanh(a.value)
    if _track(a):
        return Node(val, "tanh", (a,), (lambda g: g * (1.0 - val * val),), True)
    return Node(val, "tanh")


def relu(a) -> Node:
    a = as_node(a)
    val = K.relu_fwd(a.value).reshape(a.value.shape)
    if _track(a):
        return Node(val, "relu", (a,), (lambda g: K.relu_bwd(g, a.value).reshape(a.value.shape),), True)
    return Node(val, "relu")


def softplus(a) -> Node:
    a = as_node(a)
    val = K.softplus_fwd(a.value).reshape(a.value.shape)
    if _track(a):
        return Node(val, "softplus", (a,), (lambda g: K.softplus_bwd(g, a.value).reshape(a.value.shape),), True)
    return Node(val, "softplus")


def elu(a, alpha: float = 1.0) -> Node:
    a = as_node(a)
    pos = a.value > 0.0
    ex = np.exp(np.where(pos, 0.0, a.value))
    val = np.where(pos, a.value, alpha * (ex - 1.0))
    if _track(a):
        return Node(val, "elu", (a,), (lambda g: g * np.where(pos, 1.0, alpha * ex),), True)
    return Node(val, "elu")


def mish(a) -> Node:
    # x * tanh(softplus(x)), composed so the derivative comes for free
    a = as_node(a)
    return mul(a, tanh(softplus(a)))


def tanh_scale(a, cap: float) -> Node:
    """Soft clamp cap*tanh(x/cap); keeps exp(scale) bounded in couplings."""
    a = as_node(a)
    val = K.tanh_scale_fwd(a.value, cap).reshape(a.value.shape)
    if _track(a):
        return Node(val, "tanh_scale", (a,),
                    (lambda g: K.tanh_scale_bwd(g, val, cap).reshape(a.value.shape),), True)
    return Node(val, "tanh_scale")


# -- fused coupling transforms --------------------------------------------------

def exp_scale_shift(xb, s, t) -> Node:
    """y = xb * exp(s) + t, one node for the affine-coupling hot path."""
    xb, s, t = as_node(xb), as_node(s), as_node(t)
    val, es = K.exp_scale_shift_fwd(xb.value, s.value, t.value)
    if _track(xb, s, t):
        def vjp(g):
            return K.exp_scale_shift_bwd(g, es, xb.value)
        return Node(val, "exp_scale_shift", (xb, s, t), vjp, True)
    return Node(val, "exp_scale_shift")


def affine_inverse(yb, s, t) -> Node:
    """x = (yb - t) * exp(-s), inverse of exp_scale_shift in one node."""
    yb, s, t = as_node(yb), as_node(s), as_node(t)
    val, ens = K.affine_inverse_fwd(yb.value, s.value, t.value)
    if _track(yb, s, t):
        def vjp(g):
            return K.affine_inverse_bwd(g, ens, val)
        return Node(val, "affine_inverse", (yb, s, t), vjp, True)
    return Node(val, "affine_inverse")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError("matmul", a.value.shape, b.value.shape)
    val = a.value @ b.value
    if _track(a, b):
        return Node(val, "matmul", (a, b),
                    (lambda g: g @ b.value.T, lambda g: a.value.T @ g), True)
    return Node(val, "matmul")


def linear(x, w, b) -> Node:
    """x @ w.T + b with w of shape (out, in) and b of shape (out,)."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if x.value.shape[1] != w.value.shape[1] or w.value.shape[0] != b.value.shape[0]:
        raise ShapeMismatchError("linear", x.value.shape, w.value.shape, b.value.shape)
    val = x.value @ w.value.T + b.value
    if _track(x, w, b):
        return Node(val, "linear", (x, w, b),
                    (lambda g: g @ w.value,
                     lambda g: g.T @ x.value,
                     lambda g: g.sum(axis=0)), True)
    return Node(val, "linear")


def transpose(a) -> Node:
    a = as_node(a)
    if _track(a):
        return Node(a.value.T, "transpose", (a,), (lambda g: g.T,), True)
    return Node(a.value.T, "transpose")


def solve_right(y, w) -> Node:
    """y @ inv(w).T for a small square w; the inverse-pass mixing primitive."""
    y, w = as_node(y), as_node(w)
    d = w.value.shape[0]
    if w.value.shape != (d, d) or y.value.shape[1] != d:
        raise ShapeMismatchError("solve_right", y.value.shape, w.value.shape)
    winv = np.linalg.inv(w.value)
    val = y.value @ winv.T
    if _track(y, w):
        return Node(val, "solve_right", (y, w),
                    (lambda g: g @ winv,
                     lambda g: -winv.T @ (g.T @ y.value) @ winv.T), True)
    return Node(val, "solve_right")


def diag_embed(v) -> Node:
    v = as_node(v)
    val = np.diag(v.value)
    if _track(v):
        return Node(val, "diag_embed", (v,), (lambda g: np.diagonal(g).copy(),), True)
    return Node(val, "diag_embed")


def fill_triangular(v, d: int, upper: bool) -> Node:
    """Place a vector into the strict upper/lower triangle of a d x d matrix."""
    v = as_node(v)
    idx = np.triu_indices(d, 1) if upper else np.tril_indices(d, -1)
    val = np.zeros((d, d))
    val[idx] = v.value
    if _track(v):
        return Node(val, "fill_triangular", (v,), (lambda g: g[idx].copy(),), True)
    return Node(val, "fill_triangular")


# -- reductions and shaping -----------------------------------------------------

def nsum(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)
    if _track(a):
        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, a.value.shape)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, a.value.shape)
        return Node(np.asarray(val), "sum", (a,), (vjp,), True)
    return Node(np.asarray(val), "sum")


def nmean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    val = a.value.mean(axis=axis, keepdims=keepdims)
    scale = a.value.size / np.asarray(val).size
    if _track(a):
        def vjp(g):
            if axis is None:
                return np.broadcast_to(g / scale, a.value.shape)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg / scale, a.value.shape)
        return Node(np.asarray(val), "mean", (a,), (vjp,), True)
    return Node(np.asarray(val), "mean")


def reshape(a, shape) -> Node:
    a = as_node(a)
    val = a.value.reshape(shape)
    if _track(a):
        return Node(val, "reshape", (a,), (lambda g: g.reshape(a.value.shape),), True)
    return Node(val, "reshape")


def concat(nodes: Sequence, axis: int = 1) -> Node:
    nodes = [as_node(n) for n in nodes]
    val = np.concatenate([n.value for n in nodes], axis=axis)
    if _track(*nodes):
        sizes = [n.value.shape[axis] for n in nodes]
        offsets = np.cumsum([0] + sizes)

        def make(i):
            sl = [slice(None)] * val.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return lambda g: g[tuple(sl)]

        return Node(val, "concat", tuple(nodes), tuple(make(i) for i in range(len(nodes))), True)
    return Node(val, "concat")


def take_cols(a, idx) -> Node:
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    # contiguous ranges slice as views; general index sets copy
    if idx.size and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
        sel = slice(int(idx[0]), int(idx[0]) + idx.size)
        val = a.value[:, sel]
    else:
        sel = idx
        val = a.value[:, sel]
    if _track(a):
        def vjp(g):
            z = np.zeros_like(a.value)
            z[:, sel] = g
            return z
        return Node(val, "take_cols", (a,), (vjp,), True)
    return Node(val, "take_cols")


def put_cols(parts: Sequence, idxs: Sequence, d: int) -> Node:
    """Assemble (n, d) from column blocks; the idx sets must partition range(d)."""
    parts = [as_node(p) for p in parts]
    n = parts[0].value.shape[0]
    val = np.empty((n, d))
    for p, idx in zip(parts, idxs):
        val[:, idx] = p.value
    if _track(*parts):
        vjps = tuple((lambda g, idx=np.asarray(idx, dtype=np.intp): g[:, idx]) for idx in idxs)
        return Node(val, "put_cols", tuple(parts), vjps, True)
    return Node(val, "put_cols")


def take_slice(a, lo: int, hi: int) -> Node:
    """Column range as a view (no copy on the forward pass)."""
    a = as_node(a)
    sel = slice(lo, hi)
    val = a.value[:, sel]
    if _track(a):
        def vjp(g):
            z = np.zeros_like(a.value)
            z[:, sel] = g
            return z
        return Node(val, "take_slice", (a,), (vjp,), True)
    return Node(val, "take_slice")


def take_per_row(a, idx) -> Node:
    """Select one entry per row: out[i] = a[i, idx[i]]."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.value.shape[0])
    val = a.value[rows, idx]
    if _track(a):
        def vjp(g):
            z = np.zeros_like(a.value)
            z[rows, idx] = g
            return z
        return Node(val, "take_per_row", (a,), (vjp,), True)
    return Node(val, "take_per_row")


def cumsum(a, axis: int = -1) -> Node:
    a = as_node(a)
    val = np.cumsum(a.value, axis=axis)
    if _track(a):
        def vjp(g):
            return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return Node(val, "cumsum", (a,), (vjp,), True)
    return Node(val, "cumsum")


def where(mask, a, b) -> Node:
    """Select by a constant boolean mask (mask itself is not differentiated)."""
    a, b = as_node(a), as_node(b)
    mask = np.asarray(mask, dtype=bool)
    val = np.where(mask, a.value, b.value)
    if _track(a, b):
        return Node(val, "where", (a, b),
                    (lambda g: _unbroadcast(np.where(mask, g, 0.0), a.value.shape),
                     lambda g: _unbroadcast(np.where(mask, 0.0, g), b.value.shape)), True)
    return Node(val, "where")


def logsumexp(a, axis: int = -1) -> Node:
    """Composed log-sum-exp with a constant max shift for stability."""
    a = as_node(a)
    shift = constant(np.max(a.value, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return add(log(nsum(e, axis=axis)), reshape(shift, np.max(a.value, axis=axis).shape))


# -- Gaussian-mixture primitives -------------------------------------------------

def gm_logpdf(x, means, variances, logweights) -> Node:
    """Log density of a normalized diagonal-Gaussian mixture; grads w.r.t. x."""
    x = as_node(x)
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    logweights = np.asarray(logweights, dtype=np.float64)
    val, resp = K.gm_logpdf_fwd(x.value, means, variances, logweights)
    if _track(x):
        def vjp(g):
            return K.gm_logpdf_bwd(g, x.value, means, variances, resp)
        return Node(val, "gm_logpdf", (x,), (vjp,), True)
    return Node(val, "gm_logpdf")


def gm_pdf(x, means, variances, weights, scale: float) -> Node:
    """Scaled mixture density scale * sum_i w_i N_i(x); grads w.r.t. x."""
    x = as_node(x)
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    val, wcomp = K.gm_pdf_fwd(x.value, means, variances, weights, scale)
    if _track(x):
        def vjp(g):
            return K.gm_pdf_bwd(g, x.value, means, variances, wcomp)
        return Node(val, "gm_pdf", (x,), (vjp,), True)
    return Node(val, "gm_pdf")


def dropout(a, rate: float, rng: np.random.Generator) -> Node:
    """Inverted dropout; a no-op when rate == 0."""
    if rate <= 0.0:
        return as_node(a)
    a = as_node(a)
    mask = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return mul(a, constant(mask))


# -- backward pass ---------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Node, params: Iterable[Parameter] | None = None) -> dict[Parameter, np.ndarray]:
    """Accumulate d(root)/d(param) into each parameter's ``.grad``.

    The root must be scalar-valued.  Returns a map from parameter to its
    gradient; parameters not reachable from the root get zeros.  Calling
    backward again without zeroing doubles the accumulated gradients.
    """
    if root.value.size != 1:
        raise ShapeMismatchError("backward", root.value.shape, "scalar expected")
    if root.requires_grad:
        # process nodes in decreasing creation order: every contribution to a
        # node comes from a later-created node, so adjoints are complete when popped
        adjoint: dict[int, list] = {id(root): [np.ones_like(root.value), True]}
        heap: list[tuple[int, Node]] = [(-root.seq, root)]
        pop, push = heapq.heappop, heapq.heappush
        while heap:
            node = pop(heap)[1]
            g = adjoint.pop(id(node))[0]
            if node.param is not None:
                node.param._accum(g)
                continue
            vjps = node.vjps
            grads = vjps(g) if callable(vjps) else None
            for i, p in enumerate(node.parents):
                if not p.requires_grad:
                    continue
                contrib = grads[i] if grads is not None else vjps[i](g)
                if contrib is None:
                    continue
                cur = adjoint.get(id(p))
                if cur is None:
                    adjoint[id(p)] = [contrib, False]
                    push(heap, (-p.seq, p))
                elif cur[1]:
                    cur[0] += contrib
                else:
                    cur[0] = cur[0] + contrib
                    cur[1] = True
    if params is None:
        return {}
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.value)
        out[p] = p.grad
    return out


# -- finite-difference oracle ------------------------------------------------------

def fd_check(loss_fn: Callable[[], Node], params: Sequence[Parameter], step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the scalar graph from the parameters' current
    values and be deterministic (freeze any RNG inside it).  Error metric:
    |ad - fd| / (|fd| + 1e-12), maximized over all coordinates.
    """
    for p in params:
        p.zero_grad()
    grads = backward(loss_fn(), params)

    def value() -> float:
        with no_grad():
            return float(loss_fn().value)

    worst = 0.0
    for p in params:
        g = grads[p].reshape(-1)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            err = abs(g[i] - fd) / (abs(fd) + 1e-12)
            if err > worst:
                worst = err
    return worst


# -- parameter checkpoints ----------------------------------------------------------

def save_checkpoint(path: str, model_kind: str, params: Sequence[Parameter],
                    seed: int | None = None, config: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write a JSON manifest line plus a little-endian float64 blob.

    The blob concatenates arrays in manifest id order: the model's
    parameters first, then any extra arrays (e.g. optimizer state).
    """
    arrays: dict[str, np.ndarray] = {p.id: p.value for p in params}
    if extra_arrays:
        for k, v in extra_arrays.items():
            if k in arrays:
                raise DataFormatError(f"duplicate checkpoint id {k!r}")
            arrays[k] = np.asarray(v, dtype=np.float64)
    ids = list(arrays)
    manifest = {
        "model_kind": model_kind,
        "ids": ids,
        "shapes": {k: list(arrays[k].shape) for k in ids},
        "seed": seed,
    }
    if config is not None:
        manifest["config"] = config
    payload = b"".join(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in ids)
    blob = json.dumps(manifest).encode("utf-8") + b"\n" + payload
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (manifest, id -> array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: bad manifest ({e})") from None
    payload = raw[nl + 1:]
    expected = sum(int(np.prod(manifest["shapes"][k])) for k in manifest["ids"])
    if len(payload) != expected * 8:
        raise DataFormatError(
            f"{path}: payload holds {len(payload)} bytes, manifest expects {expected * 8}")
    arrays = {}
    off = 0
    for k in manifest["ids"]:
        shape = tuple(manifest["shapes"][k])
        n = int(np.prod(shape))
        arrays[k] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += n * 8
    return manifest, arrays

"""Invertible coupling flows with analytic inverses and log-determinants.

A time-step block applies two coupling sub-layers with alternating masks
(each transforms one half of the coordinates conditioned on the other)
followed by an invertible linear mixing layer.  A ``FlowStack`` composes
one block per time step; the prefix composition after k blocks is the
position map at time t_k, with the empty prefix being the identity.

Two coupling transforms are available: affine (default) and monotonic
rational-quadratic splines with identity tails.  Conditioner final layers
are zero-initialized so a fresh stack starts at the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import NumericalError
from .kernels import backend as K
from .rng import stream

_MIN_BIN = 1e-3
# softplus shift making zero conditioner output give unit knot derivatives
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - _MIN_BIN)))


@dataclass
class FlowConfig:
    """Architecture of one stack: K time-step blocks acting on R^d."""

    dim: int
    steps: int
    transform: str = "affine"          # "affine" | "rqs"
    width: int = 64
    depth: int = 2
    activation: str = "relu"
    dropout: float = 0.0
    spline_bins: int = 8
    spline_bound: float = 6.0
    scale_cap: float = 3.0     # exp(scale) stays in [e^-3, e^3]; keeps inverses well-conditioned
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1 or self.steps < 0:
            raise ValueError(f"bad flow config: dim={self.dim}, steps={self.steps}")
        if self.transform not in ("affine", "rqs"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.transform == "rqs" and (self.spline_bins < 2 or self.spline_bound <= 0):
            raise ValueError("spline transform needs bins >= 2 and a positive bound")


_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "softplus": ad.softplus,
                "elu": ad.elu, "mish": ad.mish}


def _act_np(name, x):
    if name == "relu":
        return K.relu_fwd(x)
    if name == "tanh":
        return np.tanh(x)
    if name == "softplus":
        return K.softplus_fwd(x)
    if name == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if name == "mish":
        return x * np.tanh(K.softplus_fwd(x))
    raise ValueError(f"unknown activation {name!r}")


class Conditioner:
    """MLP mapping the untouched coordinates to raw transform parameters.

    With no input coordinates (d = 1) it degrades to a learned constant,
    so the coupling becomes an unconditional elementwise transform.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int, cfg: FlowConfig,
                 rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = cfg.activation
        self.dropout = cfg.dropout
        self.params: list[Parameter] = []
        if in_dim == 0:
            self.const = Parameter(f"{name}.const", np.zeros(out_dim))
            self.params.append(self.const)
            return
        self.const = None
        dims = [in_dim] + [cfg.width] * cfg.depth + [out_dim]
        self.weights, self.biases = [], []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            w = np.zeros((dout, din)) if last else rng.normal(0.0, np.sqrt(2.0 / din), (dout, din))
            self.weights.append(Parameter(f"{name}.w{i}", w))
            self.biases.append(Parameter(f"{name}.b{i}", np.zeros(dout)))
        self.params = [p for pair in zip(self.weights, self.biases) for p in pair]

    def nodes(self, x: Node | None, n: int, train: bool = False,
              rng: np.random.Generator | None = None) -> Node:
        if self.const is not None:
            return ad.reshape(self.const.node(), (1, self.out_dim)) * ad.constant(np.ones((n, 1)))
        act = _ACTIVATIONS[self.activation]
        h = x
        for i in range(len(self.weights) - 1):
            h = act(ad.linear(h, self.weights[i].node(), self.biases[i].node()))
            if train and self.dropout > 0.0:
                h = ad.dropout(h, self.dropout, rng)
        return ad.linear(h, self.weights[-1].node(), self.biases[-1].node())

    def np_eval(self, x: np.ndarray | None, n: int) -> np.ndarray:
        if self.const is not None:
            return np.broadcast_to(self.const.value, (n, self.out_dim))
        h = x
        for i in range(len(self.weights) - 1):
            h = _act_np(self.activation, h @ self.weights[i].value.T + self.biases[i].value)
        return h @ self.weights[-1].value.T + self.biases[-1].value


# -- rational-quadratic spline pieces -------------------------------------------

def _spline_knots_np(raw: np.ndarray, bins: int, bound: float):
    """Raw conditioner output -> (x knots, y knots, bin lengths, derivatives)."""
    rw, rh, rd = raw[:, :bins], raw[:, bins:2 * bins], raw[:, 2 * bins:]
    ew = np.exp(rw - rw.max(axis=1, keepdims=True))
    w = ew / ew.sum(axis=1, keepdims=True)
    eh = np.exp(rh - rh.max(axis=1, keepdims=True))
    h = eh / eh.sum(axis=1, keepdims=True)
    widths = (_MIN_BIN + (1.0 - _MIN_BIN * bins) * w) * (2.0 * bound)
    heights = (_MIN_BIN + (1.0 - _MIN_BIN * bins) * h) * (2.0 * bound)
    cw = np.concatenate([np.full((raw.shape[0], 1), -bound), -bound + np.cumsum(widths, axis=1)], axis=1)
    ch = np.concatenate([np.full((raw.shape[0], 1), -bound), -bound + np.cumsum(heights, axis=1)], axis=1)
    ones = np.ones((raw.shape[0], 1))
    derivs = np.concatenate([ones, _MIN_BIN + K.softplus_fwd(rd + _DERIV_SHIFT), ones], axis=1)
    return cw, ch, widths, heights, derivs


def _bin_index(boundaries: np.ndarray, x: np.ndarray, bins: int) -> np.ndarray:
    idx = np.sum(boundaries[:, 1:-1] <= x[:, None], axis=1)
    return np.clip(idx, 0, bins - 1)


def _spline_fwd_np(x: np.ndarray, raw: np.ndarray, bins: int, bound: float):
    cw, ch, widths, heights, derivs = _spline_knots_np(raw, bins, bound)
    inside = (x >= -bound) & (x <= bound)
    xin = np.where(inside, x, 0.0)
    idx = _bin_index(cw, xin, bins)
    rows = np.arange(x.shape[0])
    xk, wk = cw[rows, idx], widths[rows, idx]
    yk, hk = ch[rows, idx], heights[rows, idx]
    dk, dk1 = derivs[rows, idx], derivs[rows, idx + 1]
    sk = hk / wk
    xi = (xin - xk) / wk
    omx = xi * (1.0 - xi)
    den = sk + (dk1 + dk - 2.0 * sk) * omx
    y = yk + hk * (sk * xi * xi + dk * omx) / den
    der = sk * sk * (dk1 * xi * xi + 2.0 * sk * omx + dk * (1.0 - xi) ** 2) / (den * den)
    return np.where(inside, y, x), np.where(inside, np.log(der), 0.0)


def _spline_inv_np(y: np.ndarray, raw: np.ndarray, bins: int, bound: float):
    cw, ch, widths, heights, derivs = _spline_knots_np(raw, bins, bound)
    inside = (y >= -bound) & (y <= bound)
    yin = np.where(inside, y, 0.0)
    idx = _bin_index(ch, yin, bins)
    rows = np.arange(y.shape[0])
    xk, wk = cw[rows, idx], widths[rows, idx]
    yk, hk = ch[rows, idx], heights[rows, idx]
    dk, dk1 = derivs[rows, idx], derivs[rows, idx + 1]
    sk = hk / wk
    dy = yin - yk
    cross = dy * (dk1 + dk - 2.0 * sk)
    a = hk * (sk - dk) + cross
    b = hk * dk - cross
    c = -sk * dy
    xi = 2.0 * c / (-b - np.sqrt(b * b - 4.0 * a * c))
    omx = xi * (1.0 - xi)
    den = sk + (dk1 + dk - 2.0 * sk) * omx
    x = xi * wk + xk
    der = sk * sk * (dk1 * xi * xi + 2.0 * sk * omx + dk * (1.0 - xi) ** 2) / (den * den)
    return np.where(inside, x, y), np.where(inside, -np.log(der), 0.0)


def _spline_knots_nodes(raw: Node, bins: int, bound: float):
    n = raw.value.shape[0]
    rw = ad.take_cols(raw, np.arange(bins))
    rh = ad.take_cols(raw, np.arange(bins, 2 * bins))
    rd = ad.take_cols(raw, np.arange(2 * bins, 3 * bins - 1))

    def norm(r):
        e = ad.exp(ad.sub(r, ad.constant(r.value.max(axis=1, keepdims=True))))
        f = ad.div(e, ad.nsum(e, axis=1, keepdims=True))
        return ad.mul(ad.add(ad.mul(f, 1.0 - _MIN_BIN * bins), _MIN_BIN), 2.0 * bound)

    widths, heights = norm(rw), norm(rh)
    neg = ad.constant(np.full((n, 1), -bound))
    cw = ad.concat([neg, ad.add(ad.cumsum(widths, axis=1), -bound)], axis=1)
    ch = ad.concat([neg, ad.add(ad.cumsum(heights, axis=1), -bound)], axis=1)
    ones = ad.constant(np.ones((n, 1)))
    derivs = ad.concat([ones, ad.add(ad.softplus(ad.add(rd, _DERIV_SHIFT)), _MIN_BIN), ones], axis=1)
    return cw, ch, widths, heights, derivs


def _spline_fwd_nodes(x: Node, raw: Node, bins: int, bound: float):
    cw, ch, widths, heights, derivs = _spline_knots_nodes(raw, bins, bound)
    inside = (x.value >= -bound) & (x.value <= bound)
    xin = ad.where(inside, x, ad.constant(np.zeros_like(x.value)))
    idx = _bin_index(cw.value, xin.value, bins)
    xk, wk = ad.take_per_row(cw, idx), ad.take_per_row(widths, idx)
    yk, hk = ad.take_per_row(ch, idx), ad.take_per_row(heights, idx)
    dk, dk1 = ad.take_per_row(derivs, idx), ad.take_per_row(derivs, idx + 1)
    sk = ad.div(hk, wk)
    xi = ad.div(ad.sub(xin, xk), wk)
    one_m = ad.sub(1.0, xi)
    omx = ad.mul(xi, one_m)
    den = ad.add(sk, ad.mul(ad.sub(ad.add(dk1, dk), ad.mul(sk, 2.0)), omx))
    num = ad.mul(hk, ad.add(ad.mul(sk, ad.square(xi)), ad.mul(dk, omx)))
    y = ad.add(yk, ad.div(num, den))
    dnum = ad.mul(ad.square(sk),
                  ad.add(ad.add(ad.mul(dk1, ad.square(xi)), ad.mul(ad.mul(sk, 2.0), omx)),
                         ad.mul(dk, ad.square(one_m))))
    logder = ad.sub(ad.log(dnum), ad.mul(ad.log(den), 2.0))
    return ad.where(inside, y, x), ad.where(inside, logder, ad.constant(np.zeros_like(x.value)))


def _spline_inv_nodes(y: Node, raw: Node, bins: int, bound: float):
    cw, ch, widths, heights, derivs = _spline_knots_nodes(raw, bins, bound)
    inside = (y.value >= -bound) & (y.value <= bound)
    yin = ad.where(inside, y, ad.constant(np.zeros_like(y.value)))
    idx = _bin_index(ch.value, yin.value, bins)
    xk, wk = ad.take_per_row(cw, idx), ad.take_per_row(widths, idx)
    yk, hk = ad.take_per_row(ch, idx), ad.take_per_row(heights, idx)
    dk, dk1 = ad.take_per_row(derivs, idx), ad.take_per_row(derivs, idx + 1)
    sk = ad.div(hk, wk)
    dy = ad.sub(yin, yk)
    tri = ad.sub(ad.add(dk1, dk), ad.mul(sk, 2.0))
    cross = ad.mul(dy, tri)
    a = ad.add(ad.mul(hk, ad.sub(sk, dk)), cross)
    b = ad.sub(ad.mul(hk, dk), cross)
    c = ad.mul(ad.mul(sk, dy), -1.0)
    disc = ad.sqrt(ad.sub(ad.square(b), ad.mul(ad.mul(a, c), 4.0)))
    xi = ad.div(ad.mul(c, 2.0), ad.sub(ad.mul(b, -1.0), disc))
    one_m = ad.sub(1.0, xi)
    omx = ad.mul(xi, one_m)
    den = ad.add(sk, ad.mul(tri, omx))
    x = ad.add(ad.mul(xi, wk), xk)
    dnum = ad.mul(ad.square(sk),
                  ad.add(ad.add(ad.mul(dk1, ad.square(xi)), ad.mul(ad.mul(sk, 2.0), omx)),
                         ad.mul(dk, ad.square(one_m))))
    logder = ad.sub(ad.log(dnum), ad.mul(ad.log(den), 2.0))
    return (ad.where(inside, x, y),
            ad.where(inside, ad.mul(logder, -1.0), ad.constant(np.zeros_like(y.value))))


# The fused coupling node covers the whole relu-MLP conditioner plus the
# affine transform in one tape entry; its hand-written backward
# (kernels.couple_back) is checked against the composed primitives by the
# finite-difference suite.

def _dropout_masks(width: int, n: int, rate: float, rng) -> tuple | None:
    if rate <= 0.0 or rng is None:
        return None
    keep = 1.0 - rate
    return ((rng.random((n, width)) >= rate) / keep,
            (rng.random((n, width)) >= rate) / keep)


def _as_selector(idx: np.ndarray):
    """Contiguous index ranges become slices (views instead of copies)."""
    if idx.size and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
        return slice(int(idx[0]), int(idx[0]) + idx.size)
    return idx


class Coupling:
    """Transforms coordinates ``out_idx`` conditioned on ``in_idx``."""

    def __init__(self, name: str, dim: int, in_idx, out_idx, cfg: FlowConfig,
                 rng: np.random.Generator):
        self.dim = dim
        self.in_idx = np.asarray(in_idx, dtype=np.intp)
        self.out_idx = np.asarray(out_idx, dtype=np.intp)
        self.kind = cfg.transform
        self.cfg = cfg
        m = len(self.out_idx)
        out_dim = 2 * m if self.kind == "affine" else m * (3 * cfg.spline_bins - 1)
        self.cond = Conditioner(name, len(self.in_idx), out_dim, cfg, rng)
        self.params = self.cond.params
        # the fused path covers the production configuration
        self.fused = (self.kind == "affine" and self.cond.const is None
                      and cfg.activation == "relu")
        self._in_sel = _as_selector(self.in_idx)
        self._out_sel = _as_selector(self.out_idx)

    def _fused_nodes(self, x: Node, train, rng, inverse: bool):
        m, d = len(self.out_idx), self.dim
        n = x.value.shape[0]
        in_sel, out_sel = self._in_sel, self._out_sel
        xa = x.value[:, in_sel]
        xb = x.value[:, out_sel]
        plist = [p for pair in zip(self.cond.weights, self.cond.biases) for p in pair]
        w = [p.value for p in plist]
        masks = _dropout_masks(w[0].shape[0], n,
                               self.cfg.dropout if train else 0.0, rng)
        cap = self.cfg.scale_cap
        if inverse:
            out_b, s, caches = K.couple_inv(xa, xb, w, cap, masks)
        else:
            out_b, s, caches = K.couple_fwd(xa, xb, w, cap, masks)
        # one node carries [y | s]; y reuses the pass-through columns of x
        val = np.empty((n, d + m))
        y_part = val[:, :d]
        y_part[:, in_sel] = xa
        y_part[:, out_sel] = out_b
        val[:, d:] = s
        parents = (x,) + tuple(p.node() for p in plist)

        def vjp(g):
            gy = g[:, :d]
            gs = np.ascontiguousarray(g[:, d:])
            gb = np.ascontiguousarray(gy[:, out_sel])
            if inverse:
                dyb = gb * caches[4]
                ds = gs - gb * out_b
                dt = -dyb
            else:
                dyb = gb * caches[4]
                ds = gs + dyb * xb
                dt = gb
            ds_raw = K.tanh_scale_bwd(ds, s, cap)
            dxa, dw2, db2, dw1, db1, dw0, db0 = K.couple_back(
                ds_raw, dt, caches, w, xa, masks)
            dx = np.empty((n, d))
            dx[:, out_sel] = dyb
            dx[:, in_sel] = gy[:, in_sel] + dxa
            return dx, dw0, db0, dw1, db1, dw2, db2

        node = ad.make_node(val, "affine_couple", parents, vjp)
        y = ad.take_slice(node, 0, d)
        ld = ad.nsum(ad.take_slice(node, d, d + m), axis=1)
        if inverse:
            ld = ad.mul(ld, -1.0)
        return y, ld

    # tape path -------------------------------------------------------------
    def forward_nodes(self, x: Node, train=False, rng=None):
        if self.fused:
            return self._fused_nodes(x, train, rng, inverse=False)
        n, m = x.value.shape[0], len(self.out_idx)
        xa = ad.take_cols(x, self.in_idx) if len(self.in_idx) else None
        raw = self.cond.nodes(xa, n, train, rng)
        xb = ad.take_cols(x, self.out_idx)
        if self.kind == "affine":
            s = ad.tanh_scale(ad.take_cols(raw, np.arange(m)), self.cfg.scale_cap)
            t = ad.take_cols(raw, np.arange(m, 2 * m))
            yb = ad.exp_scale_shift(xb, s, t)
            ld = ad.nsum(s, axis=1)
        else:
            pb = 3 * self.cfg.spline_bins - 1
            raw_f = ad.reshape(raw, (n * m, pb))
            yb_f, ld_f = _spline_fwd_nodes(ad.reshape(xb, (n * m,)), raw_f,
                                           self.cfg.spline_bins, self.cfg.spline_bound)
            yb = ad.reshape(yb_f, (n, m))
            ld = ad.nsum(ad.reshape(ld_f, (n, m)), axis=1)
        parts, idxs = [yb], [self.out_idx]
        if xa is not None:
            parts.append(xa)
            idxs.append(self.in_idx)
        return ad.put_cols(parts, idxs, self.dim), ld

    def inverse_nodes(self, y: Node):
        if self.fused:
            return self._fused_nodes(y, False, None, inverse=True)
        n, m = y.value.shape[0], len(self.out_idx)
        ya = ad.take_cols(y, self.in_idx) if len(self.in_idx) else None
        raw = self.cond.nodes(ya, n)
        yb = ad.take_cols(y, self.out_idx)
        if self.kind == "affine":
            s = ad.tanh_scale(ad.take_cols(raw, np.arange(m)), self.cfg.scale_cap)
            t = ad.take_cols(raw, np.arange(m, 2 * m))
            xb = ad.affine_inverse(yb, s, t)
            ld_inv = ad.mul(ad.nsum(s, axis=1), -1.0)
        else:
            pb = 3 * self.cfg.spline_bins - 1
            raw_f = ad.reshape(raw, (n * m, pb))
            xb_f, ld_f = _spline_inv_nodes(ad.reshape(yb, (n * m,)), raw_f,
                                           self.cfg.spline_bins, self.cfg.spline_bound)
            xb = ad.reshape(xb_f, (n, m))
            ld_inv = ad.nsum(ad.reshape(ld_f, (n, m)), axis=1)
        parts, idxs = [xb], [self.out_idx]
        if ya is not None:
            parts.append(ya)
            idxs.append(self.in_idx)
        return ad.put_cols(parts, idxs, self.dim), ld_inv

    # eval path ---------------------------------------------------------------
    def forward_np(self, x: np.ndarray):
        n, m = x.shape[0], len(self.out_idx)
        xa = x[:, self.in_idx] if len(self.in_idx) else None
        xb = x[:, self.out_idx]
        if self.fused:
            w = [p.value for pair in zip(self.cond.weights, self.cond.biases) for p in pair]
            yb, s, _ = K.couple_fwd(xa, xb, w, self.cfg.scale_cap)
            y = np.empty_like(x)
            y[:, self.out_idx] = yb
            y[:, self.in_idx] = xa
            return y, s.sum(axis=1)
        raw = self.cond.np_eval(xa, n)
        if self.kind == "affine":
            s = K.tanh_scale_fwd(raw[:, :m], self.cfg.scale_cap)
            yb, _ = K.exp_scale_shift_fwd(xb, s, raw[:, m:])
            ld = s.sum(axis=1)
        else:
            pb = 3 * self.cfg.spline_bins - 1
            yb_f, ld_f = _spline_fwd_np(xb.reshape(-1), raw.reshape(n * m, pb),
                                        self.cfg.spline_bins, self.cfg.spline_bound)
            yb, ld = yb_f.reshape(n, m), ld_f.reshape(n, m).sum(axis=1)
        y = np.empty_like(x)
        y[:, self.out_idx] = yb
        if xa is not None:
            y[:, self.in_idx] = xa
        return y, ld

    def inverse_np(self, y: np.ndarray):
        n, m = y.shape[0], len(self.out_idx)
        ya = y[:, self.in_idx] if len(self.in_idx) else None
        yb = y[:, self.out_idx]
        if self.fused:
            w = [p.value for pair in zip(self.cond.weights, self.cond.biases) for p in pair]
            xb, s, _ = K.couple_inv(ya, yb, w, self.cfg.scale_cap)
            x = np.empty_like(y)
            x[:, self.out_idx] = xb
            x[:, self.in_idx] = ya
            return x, -s.sum(axis=1)
        raw = self.cond.np_eval(ya, n)
        if self.kind == "affine":
            s = K.tanh_scale_fwd(raw[:, :m], self.cfg.scale_cap)
            xb, _ = K.affine_inverse_fwd(yb, s, raw[:, m:])
            ld_inv = -s.sum(axis=1)
        else:
            pb = 3 * self.cfg.spline_bins - 1
            xb_f, ld_f = _spline_inv_np(yb.reshape(-1), raw.reshape(n * m, pb),
                                        self.cfg.spline_bins, self.cfg.spline_bound)
            xb, ld_inv = xb_f.reshape(n, m), ld_f.reshape(n, m).sum(axis=1)
        x = np.empty_like(y)
        x[:, self.out_idx] = xb
        if ya is not None:
            x[:, self.in_idx] = ya
        return x, ld_inv


class Mixing:
    """Invertible linear layer, LU-parametrized with positive U diagonal.

    All raw parameters start at zero, i.e. the layer starts as the
    identity; its log-determinant is the sum of the raw U diagonal.
    The whole layer is one tape node each way.
    """

    def __init__(self, name: str, dim: int):
        self.dim = dim
        ntri = dim * (dim - 1) // 2
        self.raw_l = Parameter(f"{name}.l", np.zeros(ntri))
        self.raw_u = Parameter(f"{name}.u", np.zeros(ntri))
        self.raw_d = Parameter(f"{name}.d", np.zeros(dim))
        self.params = [self.raw_l, self.raw_u, self.raw_d]
        self._ilo = np.tril_indices(dim, -1)
        self._iup = np.triu_indices(dim, 1)
        self._idg = np.diag_indices(dim)

    def _factors(self):
        lo = np.eye(self.dim)
        lo[self._ilo] = self.raw_l.value
        up = np.zeros((self.dim, self.dim))
        up[self._iup] = self.raw_u.value
        expd = np.exp(self.raw_d.value)
        up[self._idg] = expd
        return lo, up, expd

    def w_value(self) -> np.ndarray:
        lo, up, _ = self._factors()
        return lo @ up

    def _raw_grads(self, dw, lo, up, expd):
        dlo = dw @ up.T
        dup = lo.T @ dw
        return dlo[self._ilo].copy(), dup[self._iup].copy(), dup[self._idg] * expd

    def forward_nodes(self, x: Node):
        lo, up, expd = self._factors()
        w = lo @ up
        val = x.value @ w.T
        x_val = x.value

        def vjp(g):
            dw = g.T @ x_val
            return (g @ w,) + self._raw_grads(dw, lo, up, expd)

        node = ad.make_node(val, "lu_mix", (x, self.raw_l.node(), self.raw_u.node(),
                                            self.raw_d.node()), vjp)
        return node, ad.nsum(self.raw_d.node())

    def inverse_nodes(self, y: Node):
        lo, up, expd = self._factors()
        w = lo @ up
        winv = np.linalg.inv(w)
        val = y.value @ winv.T
        y_val = y.value

        def vjp(g):
            dw = -winv.T @ (g.T @ y_val) @ winv.T
            return (g @ winv,) + self._raw_grads(dw, lo, up, expd)

        node = ad.make_node(val, "lu_mix_inv", (y, self.raw_l.node(), self.raw_u.node(),
                                                self.raw_d.node()), vjp)
        return node, ad.mul(ad.nsum(self.raw_d.node()), -1.0)

    def forward_np(self, x: np.ndarray):
        return x @ self.w_value().T, np.full(x.shape[0], self.raw_d.value.sum())

    def inverse_np(self, y: np.ndarray):
        return np.linalg.solve(self.w_value(), y.T).T, np.full(y.shape[0], -self.raw_d.value.sum())


class CouplingBlock:
    """One time-step map: two alternating couplings plus a mixing layer."""

    def __init__(self, name: str, cfg: FlowConfig, rng: np.random.Generator):
        d = cfg.dim
        even = np.arange(0, d, 2)
        odd = np.arange(1, d, 2)
        if d == 1:
            pairs = [(np.empty(0, dtype=np.intp), np.array([0])),
                     (np.empty(0, dtype=np.intp), np.array([0]))]
        else:
            pairs = [(even, odd), (odd, even)]
        self.couple_a = Coupling(f"{name}.a", d, *pairs[0], cfg, rng)
        self.couple_b = Coupling(f"{name}.b", d, *pairs[1], cfg, rng)
        self.mixing = Mixing(f"{name}.mix", d)
        self.params = self.couple_a.params + self.couple_b.params + self.mixing.params

    def forward_nodes(self, x: Node, train=False, rng=None):
        y, ld1 = self.couple_a.forward_nodes(x, train, rng)
        y, ld2 = self.couple_b.forward_nodes(y, train, rng)
        y, ld3 = self.mixing.forward_nodes(y)
        return y, ad.add(ad.add(ld1, ld2), ld3)

    def inverse_nodes(self, y: Node):
        x, ld3 = self.mixing.inverse_nodes(y)
        x, ld2 = self.couple_b.inverse_nodes(x)
        x, ld1 = self.couple_a.inverse_nodes(x)
        return x, ad.add(ad.add(ld1, ld2), ld3)

    def forward_np(self, x: np.ndarray):
        y, ld1 = self.couple_a.forward_np(x)
        y, ld2 = self.couple_b.forward_np(y)
        y, ld3 = self.mixing.forward_np(y)
        return y, ld1 + ld2 + ld3

    def inverse_np(self, y: np.ndarray):
        x, ld3 = self.mixing.inverse_np(y)
        x, ld2 = self.couple_b.inverse_np(x)
        x, ld1 = self.couple_a.inverse_np(x)
        return x, ld1 + ld2 + ld3


class FlowStack:
    """K composed time-step blocks; prefix k is the map to time t_k."""

    def __init__(self, cfg: FlowConfig):
        cfg.validate()
        self.cfg = cfg
        self.dim = cfg.dim
        self.steps = cfg.steps
        rng = stream(cfg.seed, "flow-init")
        self.blocks = [CouplingBlock(f"flow.t{k + 1}", cfg, rng) for k in range(cfg.steps)]

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.params]

    def copy(self) -> "FlowStack":
        other = FlowStack(FlowConfig(**asdict(self.cfg)))
        for mine, theirs in zip(self.parameters(), other.parameters()):
            theirs.value[...] = mine.value
        return other

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    # tape path -----------------------------------------------------------------
    def path_nodes(self, x0: Node, upto: int | None = None, train=False, rng=None):
        """Node lists ([x_0 .. x_k], [logdet_1 .. logdet_k]) for prefix maps."""
        upto = self.steps if upto is None else upto
        if not 0 <= upto <= self.steps:
            raise ValueError(f"upto={upto} outside [0, {self.steps}]")
        path, logdets = [x0], []
        for k in range(upto):
            y, ld = self.blocks[k].forward_nodes(path[-1], train, rng)
            if not np.isfinite(y.value).all():
                raise NumericalError(f"non-finite output in flow block {k + 1}")
            path.append(y)
            logdets.append(ld)
        return path, logdets

    def inverse_nodes(self, y: Node):
        """Full inverse pass; returns (x_0 node, total inverse log-det node)."""
        x, total = y, None
        for k in reversed(range(self.steps)):
            x, ld = self.blocks[k].inverse_nodes(x)
            if not np.isfinite(x.value).all():
                raise NumericalError(f"non-finite output in inverse of flow block {k + 1}")
            total = ld if total is None else ad.add(total, ld)
        if total is None:
            total = ad.constant(np.zeros(y.value.shape[0]))
        return x, total

    # eval path -------------------------------------------------------------------
    def forward_np(self, x0: np.ndarray, upto: int | None = None):
        upto = self.steps if upto is None else upto
        if not 0 <= upto <= self.steps:
            raise ValueError(f"upto={upto} outside [0, {self.steps}]")
        n = x0.shape[0]
        path = np.empty((n, upto + 1, self.dim))
        logdets = np.empty((n, upto))
        path[:, 0] = x0
        cur = np.asarray(x0, dtype=np.float64)
        for k in range(upto):
            cur, ld = self.blocks[k].forward_np(cur)
            if not np.isfinite(cur).all():
                raise NumericalError(f"non-finite output in flow block {k + 1}")
            path[:, k + 1] = cur
            logdets[:, k] = ld
        return path, logdets

    def inverse_np(self, y: np.ndarray):
        x = np.asarray(y, dtype=np.float64)
        total = np.zeros(x.shape[0])
        for k in reversed(range(self.steps)):
            x, ld = self.blocks[k].inverse_np(x)
            if not np.isfinite(x).all():
                raise NumericalError(f"non-finite output in inverse of flow block {k + 1}")
            total += ld
        return x, total

    # persistence -------------------------------------------------------------------
    def save(self, path: str, seed: int | None = None) -> None:
        ad.save_checkpoint(path, "flow_stack", self.parameters(),
                           seed=seed, config=asdict(self.cfg))

    @classmethod
    def load(cls, path: str) -> "FlowStack":
        manifest, arrays = ad.load_checkpoint(path)
        stack = cls(FlowConfig(**manifest["config"]))
        for p in stack.parameters():
            p.value[...] = arrays[p.id]
        return stack


# -- module-level operations -----------------------------------------------------

def block_forward(block: CouplingBlock, x: np.ndarray):
    """Apply one time-step block to points; returns (y, per-point log-det)."""
    return block.forward_np(np.asarray(x, dtype=np.float64))


def block_inverse(block: CouplingBlock, y: np.ndarray):
    """Invert one time-step block; returns (x, per-point inverse log-det)."""
    return block.inverse_np(np.asarray(y, dtype=np.float64))


def stack_forward(stack: FlowStack, x0: np.ndarray, upto: int | None = None):
    """Evaluate prefix maps: path (n, k+1, d) and per-block log-dets (n, k)."""
    return stack.forward_np(np.asarray(x0, dtype=np.float64), upto)


def pushforward_logdensity(stack: FlowStack, base_logdensity, y: np.ndarray) -> np.ndarray:
    """log density of the stack's pushforward of the base at points y."""
    x, ld_inv = stack.inverse_np(np.asarray(y, dtype=np.float64))
    return np.asarray(base_logdensity(x)) + ld_inv

# Fused Cython kernels; signatures mirror kernels/_ref.py exactly.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "cython"

cdef double _LOG_2PI = 1.8378770664093453


cdef inline object _c64(object x):
    return np.ascontiguousarray(x, dtype=np.float64)


cdef void _gemm_rm(char ta, char tb, double[:, ::1] a, double[:, ::1] b,
                   double[:, ::1] c) noexcept nogil:
    # row-major C = opA(A) @ opB(B) via column-major dgemm with swapped operands
    cdef int m = c.shape[1], n = c.shape[0]
    cdef int k = a.shape[1] if ta == c'N' else a.shape[0]
    cdef int lda = a.shape[1], ldb = b.shape[1], ldc = c.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm(&tb, &ta, &m, &n, &k, &one, &b[0, 0], &ldb, &a[0, 0], &lda,
          &zero, &c[0, 0], &ldc)


def relu_fwd(x):
    x = _c64(x)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ov[i] = xv[i] if xv[i] > 0.0 else 0.0
    return out


def relu_bwd(g, x):
    g, x = _c64(g), _c64(x)
    out = np.empty_like(x)
    cdef double[::1] gv = g.ravel()
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ov[i] = gv[i] if xv[i] > 0.0 else 0.0
    return out


def softplus_fwd(x):
    x = _c64(x)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v
    for i in range(n):
        v = xv[i]
        ov[i] = log1p(exp(-v if v > 0.0 else v)) + (v if v > 0.0 else 0.0)
    return out


def softplus_bwd(g, x):
    g, x = _c64(g), _c64(x)
    out = np.empty_like(x)
    cdef double[::1] gv = g.ravel()
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ov[i] = gv[i] / (1.0 + exp(-xv[i]))
    return out


def tanh_scale_fwd(x, double cap):
    x = _c64(x)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ov[i] = cap * tanh(xv[i] / cap)
    return out


def tanh_scale_bwd(g, y, double cap):
    g, y = _c64(g), _c64(y)
    out = np.empty_like(y)
    cdef double[::1] gv = g.ravel()
    cdef double[::1] yv = y.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = yv.shape[0]
    cdef double r
    for i in range(n):
        r = yv[i] / cap
        ov[i] = gv[i] * (1.0 - r * r)
    return out


def exp_scale_shift_fwd(xb, s, t):
    xb, s, t = _c64(xb), _c64(s), _c64(t)
    y = np.empty_like(xb)
    es = np.empty_like(s)
    cdef double[::1] xv = xb.ravel()
    cdef double[::1] sv = s.ravel()
    cdef double[::1] tv = t.ravel()
    cdef double[::1] yv = y.ravel()
    cdef double[::1] ev = es.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ev[i] = exp(sv[i])
        yv[i] = xv[i] * ev[i] + tv[i]
    return y, es


def exp_scale_shift_bwd(g, es, xb):
    g, es, xb = _c64(g), _c64(es), _c64(xb)
    dxb = np.empty_like(xb)
    ds = np.empty_like(xb)
    cdef double[::1] gv = g.ravel()
    cdef double[::1] ev = es.ravel()
    cdef double[::1] xv = xb.ravel()
    cdef double[::1] dxv = dxb.ravel()
    cdef double[::1] dsv = ds.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        dxv[i] = gv[i] * ev[i]
        dsv[i] = dxv[i] * xv[i]
    return dxb, ds, g


def affine_inverse_fwd(yb, s, t):
    yb, s, t = _c64(yb), _c64(s), _c64(t)
    x = np.empty_like(yb)
    ens = np.empty_like(s)
    cdef double[::1] yv = yb.ravel()
    cdef double[::1] sv = s.ravel()
    cdef double[::1] tv = t.ravel()
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ev = ens.ravel()
    cdef Py_ssize_t i, n = yv.shape[0]
    for i in range(n):
        ev[i] = exp(-sv[i])
        xv[i] = (yv[i] - tv[i]) * ev[i]
    return x, ens


def affine_inverse_bwd(g, ens, x):
    g, ens, x = _c64(g), _c64(ens), _c64(x)
    dyb = np.empty_like(x)
    ds = np.empty_like(x)
    dt = np.empty_like(x)
    cdef double[::1] gv = g.ravel()
    cdef double[::1] ev = ens.ravel()
    cdef double[::1] xv = x.ravel()
    cdef double[::1] dyv = dyb.ravel()
    cdef double[::1] dsv = ds.ravel()
    cdef double[::1] dtv = dt.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        dyv[i] = gv[i] * ev[i]
        dsv[i] = -gv[i] * xv[i]
        dtv[i] = -dyv[i]
    return dyb, ds, dt


# -- fused coupling layer -------------------------------------------------------

cdef void _bias_act(double[:, ::1] z, double[::1] b, double[:, ::1] h,
                    double[:, ::1] mask) noexcept nogil:
    # z += bias (broadcast); h = relu(z) [* mask]
    cdef Py_ssize_t i, j, n = z.shape[0], w = z.shape[1]
    for i in range(n):
        for j in range(w):
            z[i, j] += b[j]
            h[i, j] = z[i, j] if z[i, j] > 0.0 else 0.0
            if mask is not None:
                h[i, j] *= mask[i, j]


cdef void _bias_only(double[:, ::1] raw, double[::1] b) noexcept nogil:
    cdef Py_ssize_t i, j, n = raw.shape[0], w = raw.shape[1]
    for i in range(n):
        for j in range(w):
            raw[i, j] += b[j]


cdef object _cond_forward(object xa, list w, object masks):
    """Conditioner core: returns (raw, z0, h0, z1, h1)."""
    cdef object w0 = w[0], b0 = w[1], w1 = w[2], b1 = w[3], w2 = w[4], b2 = w[5]
    cdef Py_ssize_t n = xa.shape[0]
    cdef Py_ssize_t h = w0.shape[0], o = w2.shape[0]
    z0 = np.empty((n, h)); h0 = np.empty((n, h))
    z1 = np.empty((n, h)); h1 = np.empty((n, h))
    raw = np.empty((n, o))
    cdef double[:, ::1] m0 = masks[0] if masks is not None else None
    cdef double[:, ::1] m1 = masks[1] if masks is not None else None
    _gemm_rm(c'N', c'T', xa, w0, z0)
    _bias_act(z0, b0, h0, m0)
    _gemm_rm(c'N', c'T', h0, w1, z1)
    _bias_act(z1, b1, h1, m1)
    _gemm_rm(c'N', c'T', h1, w2, raw)
    _bias_only(raw, b2)
    return raw, z0, h0, z1, h1


def couple_fwd(xa, xb, w, double cap, masks=None):
    xa, xb = _c64(xa), _c64(xb)
    w = [_c64(arr) for arr in w]
    raw, z0, h0, z1, h1 = _cond_forward(xa, w, masks)
    cdef Py_ssize_t n = xa.shape[0], m = xb.shape[1]
    s = np.empty((n, m)); es = np.empty((n, m)); yb = np.empty((n, m))
    cdef double[:, ::1] rv = raw
    cdef double[:, ::1] xv = xb
    cdef double[:, ::1] sv = s
    cdef double[:, ::1] ev = es
    cdef double[:, ::1] yv = yb
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            sv[i, j] = cap * tanh(rv[i, j] / cap)
            ev[i, j] = exp(sv[i, j])
            yv[i, j] = xv[i, j] * ev[i, j] + rv[i, j + m]
    return yb, s, (z0, h0, z1, h1, es)


def couple_inv(ya, yb, w, double cap, masks=None):
    ya, yb = _c64(ya), _c64(yb)
    w = [_c64(arr) for arr in w]
    raw, z0, h0, z1, h1 = _cond_forward(ya, w, masks)
    cdef Py_ssize_t n = ya.shape[0], m = yb.shape[1]
    s = np.empty((n, m)); ens = np.empty((n, m)); xb = np.empty((n, m))
    cdef double[:, ::1] rv = raw
    cdef double[:, ::1] yv = yb
    cdef double[:, ::1] sv = s
    cdef double[:, ::1] ev = ens
    cdef double[:, ::1] xv = xb
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            sv[i, j] = cap * tanh(rv[i, j] / cap)
            ev[i, j] = exp(-sv[i, j])
            xv[i, j] = (yv[i, j] - rv[i, j + m]) * ev[i, j]
    return xb, s, (z0, h0, z1, h1, ens)


cdef void _relu_mask_back(double[:, ::1] dh, double[:, ::1] z,
                          double[:, ::1] mask, double[:, ::1] dz) noexcept nogil:
    cdef Py_ssize_t i, j, n = dh.shape[0], w = dh.shape[1]
    cdef double v
    for i in range(n):
        for j in range(w):
            v = dh[i, j] * mask[i, j] if mask is not None else dh[i, j]
            dz[i, j] = v if z[i, j] > 0.0 else 0.0


cdef object _colsum(double[:, ::1] x):
    out = np.zeros(x.shape[1])
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            ov[j] += x[i, j]
    return out


def couple_back(dcond_s, dt, caches, w, xa, masks=None):
    dcond_s, dt, xa = _c64(dcond_s), _c64(dt), _c64(xa)
    w = [_c64(arr) for arr in w]
    z0, h0, z1, h1, _ = caches
    cdef Py_ssize_t n = dcond_s.shape[0], m = dcond_s.shape[1]
    cdef Py_ssize_t h = w[0].shape[0], a = xa.shape[1]
    draw = np.empty((n, 2 * m))
    cdef double[:, ::1] dv = draw
    cdef double[:, ::1] dsv = dcond_s
    cdef double[:, ::1] dtv = dt
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            dv[i, j] = dsv[i, j]
            dv[i, j + m] = dtv[i, j]
    dh1 = np.empty((n, h)); dz1 = np.empty((n, h))
    dh0 = np.empty((n, h)); dz0 = np.empty((n, h))
    cdef double[:, ::1] m0 = masks[0] if masks is not None else None
    cdef double[:, ::1] m1 = masks[1] if masks is not None else None
    _gemm_rm(c'N', c'N', draw, w[4], dh1)
    _relu_mask_back(dh1, z1, m1, dz1)
    _gemm_rm(c'N', c'N', dz1, w[2], dh0)
    _relu_mask_back(dh0, z0, m0, dz0)
    dxa = np.empty((n, a))
    dw2 = np.empty((2 * m, h)); dw1 = np.empty((h, h)); dw0 = np.empty((h, a))
    _gemm_rm(c'N', c'N', dz0, w[0], dxa)
    _gemm_rm(c'T', c'N', draw, h1, dw2)
    _gemm_rm(c'T', c'N', dz1, h0, dw1)
    _gemm_rm(c'T', c'N', dz0, xa, dw0)
    return dxa, dw2, _colsum(draw), dw1, _colsum(dz1), dw0, _colsum(dz0)


def adam_update(p, g, m, v, t, double lr, double b1, double b2, double eps):
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update requires contiguous parameter/state arrays")
    g = _c64(g)
    cdef double[::1] pv = p.ravel()
    cdef double[::1] gv = g.ravel()
    cdef double[::1] mv = m.ravel()
    cdef double[::1] vv = v.ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double c1 = 1.0 - b1 ** t
    cdef double c2 = 1.0 - b2 ** t
    for i in range(n):
        mv[i] = b1 * mv[i] + (1.0 - b1) * gv[i]
        vv[i] = b2 * vv[i] + (1.0 - b2) * gv[i] * gv[i]
        pv[i] -= lr * (mv[i] / c1) / (sqrt(vv[i] / c2) + eps)


def gm_logpdf_fwd(x, means, variances, logweights):
    x, means = _c64(x), _c64(means)
    variances, logweights = _c64(variances), _c64(logweights)
    cdef Py_ssize_t n = x.shape[0], c = means.shape[0], d = means.shape[1]
    logp = np.empty(n)
    resp = np.empty((n, c))
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] mu = means
    cdef double[:, ::1] var = variances
    cdef double[::1] lw = logweights
    cdef double[::1] lpv = logp
    cdef double[:, ::1] rv = resp
    norm = np.sum(np.log(variances), axis=1) + d * _LOG_2PI
    cdef double[::1] nv = norm
    cdef Py_ssize_t i, j, k
    cdef double quad, diff, hi, tot, sc
    for i in range(n):
        hi = -1e308
        for j in range(c):
            quad = 0.0
            for k in range(d):
                diff = xv[i, k] - mu[j, k]
                quad += diff * diff / var[j, k]
            sc = lw[j] - 0.5 * (quad + nv[j])
            rv[i, j] = sc
            if sc > hi:
                hi = sc
        tot = 0.0
        for j in range(c):
            rv[i, j] = exp(rv[i, j] - hi)
            tot += rv[i, j]
        lpv[i] = log(tot) + hi
        for j in range(c):
            rv[i, j] /= tot
    return logp, resp


def gm_logpdf_bwd(g, x, means, variances, resp):
    g, x, means = _c64(g), _c64(x), _c64(means)
    variances, resp = _c64(variances), _c64(resp)
    cdef Py_ssize_t n = x.shape[0], c = means.shape[0], d = means.shape[1]
    dx = np.empty((n, d))
    cdef double[::1] gv = g.ravel()
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] mu = means
    cdef double[:, ::1] var = variances
    cdef double[:, ::1] rv = resp
    cdef double[:, ::1] dv = dx
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for k in range(d):
            acc = 0.0
            for j in range(c):
                acc += rv[i, j] * (mu[j, k] - xv[i, k]) / var[j, k]
            dv[i, k] = gv[i] * acc
    return dx


def gm_pdf_fwd(x, means, variances, weights, double scale):
    x, means = _c64(x), _c64(means)
    variances, weights = _c64(variances), _c64(weights)
    cdef Py_ssize_t n = x.shape[0], c = means.shape[0], d = means.shape[1]
    val = np.empty(n)
    wcomp = np.empty((n, c))
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] mu = means
    cdef double[:, ::1] var = variances
    cdef double[::1] wv = weights
    cdef double[::1] valv = val
    cdef double[:, ::1] cv = wcomp
    norm = np.sum(np.log(variances), axis=1) + d * _LOG_2PI
    cdef double[::1] nv = norm
    cdef Py_ssize_t i, j, k
    cdef double quad, diff, tot
    for i in range(n):
        tot = 0.0
        for j in range(c):
            quad = 0.0
            for k in range(d):
                diff = xv[i, k] - mu[j, k]
                quad += diff * diff / var[j, k]
            cv[i, j] = scale * wv[j] * exp(-0.5 * (quad + nv[j]))
            tot += cv[i, j]
        valv[i] = tot
    return val, wcomp


def gm_pdf_bwd(g, x, means, variances, wcomp):
    g, x, means = _c64(g), _c64(x), _c64(means)
    variances, wcomp = _c64(variances), _c64(wcomp)
    cdef Py_ssize_t n = x.shape[0], c = means.shape[0], d = means.shape[1]
    dx = np.empty((n, d))
    cdef double[::1] gv = g.ravel()
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] mu = means
    cdef double[:, ::1] var = variances
    cdef double[:, ::1] cv = wcomp
    cdef double[:, ::1] dv = dx
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for k in range(d):
            acc = 0.0
            for j in range(c):
                acc += cv[i, j] * (mu[j, k] - xv[i, k]) / var[j, k]
            dv[i, k] = gv[i] * acc
    return dx

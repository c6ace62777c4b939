"""Pure-numpy kernel backend.

These are the hot elementwise/fused operations of the training loop.  The
compiled extension (``_speedups``) implements the same signatures; either
backend may be active, selected at import time in ``kernels/__init__``.
All arrays are C-contiguous float64.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_LOG_2PI = float(np.log(2.0 * np.pi))


# -- activations --------------------------------------------------------------

def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(g, x):
    # derivative at 0 defined as 0
    return np.where(x > 0.0, g, 0.0)


def softplus_fwd(x):
    # stable: log1p(exp(-|x|)) + max(x, 0)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_bwd(g, x):
    return g / (1.0 + np.exp(-x))


def tanh_scale_fwd(x, cap):
    return cap * np.tanh(x / cap)


def tanh_scale_bwd(g, y, cap):
    return g * (1.0 - (y / cap) ** 2)


# -- affine coupling transform -------------------------------------------------

def exp_scale_shift_fwd(xb, s, t):
    """y = xb * exp(s) + t; returns (y, exp(s)) with exp(s) cached for backward."""
    es = np.exp(s)
    return xb * es + t, es


def exp_scale_shift_bwd(g, es, xb):
    dxb = g * es
    ds = dxb * xb
    return dxb, ds, g


def affine_inverse_fwd(yb, s, t):
    """x = (yb - t) * exp(-s); returns (x, exp(-s))."""
    ens = np.exp(-s)
    return (yb - t) * ens, ens


def affine_inverse_bwd(g, ens, x):
    dyb = g * ens
    ds = -g * x
    dt = -dyb
    return dyb, ds, dt


# -- fused coupling layer (relu-MLP conditioner + affine transform) -------------

def couple_fwd(xa, xb, w, cap, masks=None):
    """Forward coupling pass; returns (yb, s, caches-for-backward)."""
    z0 = xa @ w[0].T + w[1]
    h0 = relu_fwd(z0)
    if masks is not None:
        h0 = h0 * masks[0]
    z1 = h0 @ w[2].T + w[3]
    h1 = relu_fwd(z1)
    if masks is not None:
        h1 = h1 * masks[1]
    raw = h1 @ w[4].T + w[5]
    m = xb.shape[1]
    s = tanh_scale_fwd(raw[:, :m], cap)
    yb, es = exp_scale_shift_fwd(xb, s, raw[:, m:])
    return yb, s, (z0, h0, z1, h1, es)


def couple_inv(ya, yb, w, cap, masks=None):
    """Inverse coupling pass (the conditioner sees the untouched block ya)."""
    z0 = ya @ w[0].T + w[1]
    h0 = relu_fwd(z0)
    if masks is not None:
        h0 = h0 * masks[0]
    z1 = h0 @ w[2].T + w[3]
    h1 = relu_fwd(z1)
    if masks is not None:
        h1 = h1 * masks[1]
    raw = h1 @ w[4].T + w[5]
    m = yb.shape[1]
    s = tanh_scale_fwd(raw[:, :m], cap)
    xb, ens = affine_inverse_fwd(yb, s, raw[:, m:])
    return xb, s, (z0, h0, z1, h1, ens)


def couple_back(dcond_s, dt, caches, w, xa, masks=None):
    """Conditioner backward: raw-space grads -> (dxa, dw2, db2, dw1, db1, dw0, db0)."""
    z0, h0, z1, h1, _ = caches
    draw = np.concatenate([dcond_s, dt], axis=1)
    dh1 = draw @ w[4]
    if masks is not None:
        dh1 = dh1 * masks[1]
    dz1 = relu_bwd(dh1, z1)
    dh0 = dz1 @ w[2]
    if masks is not None:
        dh0 = dh0 * masks[0]
    dz0 = relu_bwd(dh0, z0)
    return (dz0 @ w[0], draw.T @ h1, draw.sum(axis=0),
            dz1.T @ h0, dz1.sum(axis=0), dz0.T @ xa, dz0.sum(axis=0))


# -- optimizer ----------------------------------------------------------------

def adam_update(p, g, m, v, t, lr, b1, b2, eps):
    """One Adam step with bias correction, in place on p, m, v."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- diagonal Gaussian mixtures -------------------------------------------------

def gm_logpdf_fwd(x, means, variances, logweights):
    """Log density of a normalized diagonal-Gaussian mixture.

    x: (n, d); means/variances: (c, d); logweights: (c,).
    Returns (logp (n,), resp (n, c)) where resp are posterior component
    responsibilities, cached for the backward pass.
    """
    diff = x[:, None, :] - means[None, :, :]            # n x c x d
    quad = np.sum(diff * diff / variances[None, :, :], axis=2)
    norm = np.sum(np.log(variances), axis=1) + variances.shape[1] * _LOG_2PI
    score = logweights[None, :] - 0.5 * (quad + norm[None, :])
    hi = np.max(score, axis=1, keepdims=True)
    es = np.exp(score - hi)
    tot = np.sum(es, axis=1)
    logp = np.log(tot) + hi[:, 0]
    return logp, es / tot[:, None]


def gm_logpdf_bwd(g, x, means, variances, resp):
    # d logp / dx = sum_i resp_i * (mu_i - x) / var_i
    pull = resp[:, :, None] * (means[None, :, :] - x[:, None, :]) / variances[None, :, :]
    return g[:, None] * np.sum(pull, axis=1)


def gm_pdf_fwd(x, means, variances, weights, scale):
    """Scaled (unnormalized mass) mixture density: scale * sum_i w_i N_i(x).

    Returns (value (n,), wcomp (n, c)) with wcomp_i = scale * w_i * N_i(x).
    """
    diff = x[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff / variances[None, :, :], axis=2)
    norm = np.sum(np.log(variances), axis=1) + variances.shape[1] * _LOG_2PI
    wcomp = (scale * weights)[None, :] * np.exp(-0.5 * (quad + norm[None, :]))
    return np.sum(wcomp, axis=1), wcomp


def gm_pdf_bwd(g, x, means, variances, wcomp):
    pull = wcomp[:, :, None] * (means[None, :, :] - x[:, None, :]) / variances[None, :, :]
    return g[:, None] * np.sum(pull, axis=1)

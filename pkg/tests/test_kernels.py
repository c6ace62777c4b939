"""Backend parity: the compiled kernels must match the numpy reference."""

import numpy as np
import pytest

from mfgflow.kernels import _ref, backend

pytestmark = pytest.mark.skipif(backend is _ref, reason="compiled backend not built")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def assert_same(a, b, tol=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    assert np.abs(a - b).max() <= tol * max(1.0, np.abs(b).max())


def test_activations(rng):
    x = rng.standard_normal((13, 7)) * 3
    g = rng.standard_normal((13, 7))
    assert_same(backend.relu_fwd(x), _ref.relu_fwd(x))
    assert_same(backend.relu_bwd(g, x), _ref.relu_bwd(g, x))
    assert_same(backend.softplus_fwd(x), _ref.softplus_fwd(x))
    assert_same(backend.softplus_bwd(g, x), _ref.softplus_bwd(g, x))
    y = backend.tanh_scale_fwd(x, 3.0)
    assert_same(y, _ref.tanh_scale_fwd(x, 3.0))
    assert_same(backend.tanh_scale_bwd(g, y, 3.0), _ref.tanh_scale_bwd(g, y, 3.0))


def test_affine_transform(rng):
    xb = rng.standard_normal((9, 4))
    s = rng.standard_normal((9, 4))
    t = rng.standard_normal((9, 4))
    g = rng.standard_normal((9, 4))
    y1, es1 = backend.exp_scale_shift_fwd(xb, s, t)
    y2, es2 = _ref.exp_scale_shift_fwd(xb, s, t)
    assert_same(y1, y2)
    for a, b in zip(backend.exp_scale_shift_bwd(g, es1, xb),
                    _ref.exp_scale_shift_bwd(g, es2, xb)):
        assert_same(a, b)
    x1, e1 = backend.affine_inverse_fwd(xb, s, t)
    x2, e2 = _ref.affine_inverse_fwd(xb, s, t)
    assert_same(x1, x2)
    for a, b in zip(backend.affine_inverse_bwd(g, e1, x1),
                    _ref.affine_inverse_bwd(g, e2, x2)):
        assert_same(a, b)


def test_adam_parity(rng):
    p1 = rng.standard_normal(40)
    g = rng.standard_normal(40)
    m1, v1 = np.zeros(40), np.zeros(40)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    for t in range(1, 6):
        backend.adam_update(p1, g, m1, v1, t, 1e-2, 0.9, 0.999, 1e-8)
        _ref.adam_update(p2, g, m2, v2, t, 1e-2, 0.9, 0.999, 1e-8)
    assert_same(p1, p2)
    assert_same(m1, m2)
    assert_same(v1, v2)


def test_gm_parity(rng):
    x = rng.standard_normal((17, 3)) * 2
    means = rng.standard_normal((4, 3))
    variances = rng.uniform(0.2, 2.0, (4, 3))
    w = np.full(4, 0.25)
    g = rng.standard_normal(17)
    lp1, r1 = backend.gm_logpdf_fwd(x, means, variances, np.log(w))
    lp2, r2 = _ref.gm_logpdf_fwd(x, means, variances, np.log(w))
    assert_same(lp1, lp2)
    assert_same(r1, r2)
    assert_same(backend.gm_logpdf_bwd(g, x, means, variances, r1),
                _ref.gm_logpdf_bwd(g, x, means, variances, r2))
    v1, c1 = backend.gm_pdf_fwd(x, means, variances, w, 50.0)
    v2, c2 = _ref.gm_pdf_fwd(x, means, variances, w, 50.0)
    assert_same(v1, v2)
    assert_same(backend.gm_pdf_bwd(g, x, means, variances, c1),
                _ref.gm_pdf_bwd(g, x, means, variances, c2))


def test_couple_parity(rng):
    n, a, h, m = 11, 3, 16, 2
    w = [rng.standard_normal((h, a)), rng.standard_normal(h),
         rng.standard_normal((h, h)), rng.standard_normal(h),
         rng.standard_normal((2 * m, h)), rng.standard_normal(2 * m)]
    xa = rng.standard_normal((n, a))
    xb = rng.standard_normal((n, m))
    for masks in (None, ((rng.random((n, h)) >= 0.25) / 0.75,
                         (rng.random((n, h)) >= 0.25) / 0.75)):
        yb1, s1, c1 = backend.couple_fwd(xa, xb, w, 3.0, masks)
        yb2, s2, c2 = _ref.couple_fwd(xa, xb, w, 3.0, masks)
        assert_same(yb1, yb2)
        assert_same(s1, s2)
        ds = rng.standard_normal((n, m))
        dt = rng.standard_normal((n, m))
        for o1, o2 in zip(backend.couple_back(ds, dt, c1, w, xa, masks),
                          _ref.couple_back(ds, dt, c2, w, xa, masks)):
            assert_same(o1, o2)
        xb1, t1, _ = backend.couple_inv(xa, xb, w, 3.0, masks)
        xb2, t2, _ = _ref.couple_inv(xa, xb, w, 3.0, masks)
        assert_same(xb1, xb2)
        assert_same(t1, t2)

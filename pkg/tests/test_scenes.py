import json

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mfgflow.errors import SchemaError, UnknownSceneError
from mfgflow.scenes import (BUILTIN_SCENES, GaussianMixtureField, builtin_scene, gm_density,
                            gm_logdensity, gm_sample, load_scene, save_scene)


def test_standard_normal_density_at_origin():
    f = GaussianMixtureField(1.0, [1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    assert np.allclose(gm_density(f, [[0.0, 0.0]]), 1.0 / (2 * np.pi))


def test_two_bars_peak_against_scipy():
    scene = builtin_scene("two_bars")
    pt = np.array([[-2.0, 1.25]])
    oracle = 50 * 0.5 * (multivariate_normal.pdf(pt[0], [-2, 1.25], np.diag([1.5, 0.01]))
                         + multivariate_normal.pdf(pt[0], [4, 0.75], np.diag([1.5, 0.01])))
    assert np.allclose(gm_density(scene.obstacle_true, pt), oracle, rtol=1e-12)


def test_mixture_density_against_scipy(rng):
    means = rng.standard_normal((3, 2)) * 2
    variances = rng.uniform(0.2, 1.5, (3, 2))
    w = np.array([0.5, 0.3, 0.2])
    f = GaussianMixtureField(7.0, w, means, variances)
    x = rng.standard_normal((40, 2)) * 2
    oracle = 7.0 * sum(wi * multivariate_normal.pdf(x, means[i], np.diag(variances[i]))
                       for i, wi in enumerate(w))
    assert np.allclose(f.density(x), oracle, rtol=1e-12)
    assert np.allclose(f.logdensity(x), np.log(oracle), rtol=1e-12)


def test_mirror_symmetry():
    f = GaussianMixtureField(1.0, [0.5, 0.5], [[1.0, 2.0], [-1.0, -2.0]],
                             [[0.4, 0.7], [0.4, 0.7]])
    x = np.array([[0.3, -1.1], [2.0, 0.5]])
    assert np.allclose(f.density(x), f.density(-x), rtol=1e-14)


def test_sampling_moments():
    scene = builtin_scene("gaussian_d2")
    pts = gm_sample(scene.p0, np.random.default_rng(1), 100_000)
    assert np.abs(pts.mean(axis=0) - [0.0, 3.0]).max() < 0.02
    assert np.abs(pts.var(axis=0) - 0.3).max() < 0.02


def test_sampling_determinism():
    f = builtin_scene("two_bars").p0
    a = gm_sample(f, np.random.default_rng(5), 64)
    b = gm_sample(f, np.random.default_rng(5), 64)
    assert np.array_equal(a, b)


def test_sampling_requires_distribution():
    obstacle = builtin_scene("two_bars").obstacle_true
    with pytest.raises(ValueError, match="scale"):
        obstacle.sample(np.random.default_rng(0), 3)


def test_positive_variance_enforced():
    with pytest.raises(ValueError, match="positive"):
        GaussianMixtureField(1.0, [1.0], [[0.0]], [[0.0]])


def test_builtin_parameters():
    g2 = builtin_scene("gaussian_d2")
    assert np.array_equal(g2.p0.means[0], [0.0, 3.0])
    assert np.array_equal(g2.p1.means[0], [0.0, -3.0])
    assert g2.obstacle_true.scale == 50.0
    assert np.array_equal(g2.obstacle_true.diag_covs[0], [1.0, 0.5])

    tb = builtin_scene("two_bars")
    assert tb.obstacle_true.scale == 50.0
    assert np.array_equal(tb.obstacle_true.means[1], [4.0, 0.75])
    assert np.array_equal(tb.obstacle_true.diag_covs[0], [1.5, 0.01])
    assert np.array_equal(tb.domain_lo, [-3.0, -3.0])
    assert np.array_equal(tb.domain_hi, [3.0, 3.0])

    mnt = builtin_scene("mountains")
    assert len(mnt.obstacle_true.weights) == 4
    assert np.array_equal(mnt.obstacle_true.means[0], [1.0, 0.25, 0.0])

    cyl = builtin_scene("cylinders3")
    assert cyl.obstacle_true.constant_dims == (2,)
    assert np.array_equal(cyl.obstacle_true.means[2][:2], [-2.5, 2.0])

    assert builtin_scene("flower").obstacle_true.means.shape == (4, 2)
    for name in BUILTIN_SCENES:
        scene = builtin_scene(name)
        assert scene.lambdas == (1.0, 1.0, 5.0)


def test_unknown_scene_lists_valid_names():
    with pytest.raises(UnknownSceneError, match="two_bars"):
        builtin_scene("nope")


def test_constant_dims_invariance(rng):
    for name in ("cylinders3", "gaussian_d5", "gaussian_d10"):
        scene = builtin_scene(name)
        f = scene.obstacle_true
        x = rng.standard_normal((20, scene.d))
        for j in f.constant_dims:
            shifted = x.copy()
            shifted[:, j] += rng.standard_normal(20) * 10
            assert np.array_equal(f.density(x), f.density(shifted))


def test_obstacle_mass_positive_and_finite():
    from mfgflow.bilevel import QuadratureSpec, quadrature_points

    for name in BUILTIN_SCENES:
        scene = builtin_scene(name)
        spec = QuadratureSpec.for_scene(scene)
        pts, wts = quadrature_points(spec, scene.domain_lo, scene.domain_hi)
        mass = float(wts @ scene.obstacle_true.density(pts))
        assert np.isfinite(mass) and mass > 0.0


def test_scene_json_roundtrip():
    for name in BUILTIN_SCENES:
        scene = builtin_scene(name)
        rt = load_scene(save_scene(scene))
        assert rt.name == scene.name and rt.d == scene.d and rt.steps == scene.steps
        assert rt.lambdas == scene.lambdas
        for a, b in ((rt.p0, scene.p0), (rt.p1, scene.p1),
                     (rt.obstacle_true, scene.obstacle_true)):
            assert np.array_equal(a.means, b.means)
            assert np.array_equal(a.diag_covs, b.diag_covs)
            assert a.constant_dims == b.constant_dims


def test_unnormalized_weights_rejected():
    scene = builtin_scene("two_bars")
    obj = json.loads(save_scene(scene))
    obj["p0"]["weights"] = [0.5, 0.6]
    with pytest.raises(SchemaError, match="p0"):
        load_scene(json.dumps(obj))


def test_missing_lambda_named():
    obj = json.loads(save_scene(builtin_scene("two_bars")))
    del obj["lambdas"]["D"]
    with pytest.raises(SchemaError, match="lambdas.D"):
        load_scene(json.dumps(obj))


def test_logdensity_matches_log_of_density(rng):
    f = builtin_scene("flower").obstacle_true
    x = rng.standard_normal((100, 2)) * 2
    d = f.density(x)
    keep = d > 1e-300
    rel = np.abs(f.logdensity(x)[keep] - np.log(d[keep]))
    assert rel.max() < 1e-12

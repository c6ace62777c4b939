import numpy as np
import pytest

from mfgflow import autodiff as ad
from mfgflow.errors import NumericalError
from mfgflow.obstacle import (GRID_POINT_CAP, ObstacleConfig, ObstacleNet, field_on_grid,
                              field_values, make_grid, obstacle_eval)
from mfgflow.scenes import builtin_scene

from conftest import perturb


def test_fresh_net_is_constant_one(rng):
    net = ObstacleNet(ObstacleConfig(dim=3, width=32, seed=0))
    x = rng.standard_normal((50, 3)) * 4
    assert np.allclose(net.eval_np(x), 1.0, atol=1e-15)


def test_positive_everywhere(rng):
    net = perturb(ObstacleNet(ObstacleConfig(dim=2, width=32, seed=0)), 0.1, 1)
    x = rng.uniform(-6, 6, (100_000, 2))
    assert net.eval_np(x).min() > 0.0


def test_eval_nodes_matches_eval_np(rng):
    net = perturb(ObstacleNet(ObstacleConfig(dim=2, width=32, seed=0)), 0.1, 1)
    x = rng.standard_normal((20, 2))
    node = obstacle_eval(net, ad.constant(x))
    assert np.array_equal(node.value, net.eval_np(x))


def test_gradient_fd(rng):
    net = perturb(ObstacleNet(ObstacleConfig(dim=2, width=8, seed=3)), 0.1, 44)
    x = ad.constant(rng.standard_normal((12, 2)))

    def loss():
        return ad.nmean(ad.square(net.eval_nodes(x)))

    assert ad.fd_check(loss, net.parameters(), step=1e-6) < 1e-5


@pytest.mark.parametrize("activation", ["relu", "softplus", "tanh", "elu", "mish"])
def test_activations_positive(activation, rng):
    net = perturb(ObstacleNet(ObstacleConfig(dim=2, width=16, seed=1,
                                             activation=activation)), 0.1, 2)
    assert net.eval_np(rng.standard_normal((200, 2)) * 3).min() > 0.0


def test_hidden_permutation_symmetry(rng):
    # permuting hidden units (rows of each hidden map, columns of the next)
    # leaves outputs unchanged
    net = perturb(ObstacleNet(ObstacleConfig(dim=2, width=16, seed=5)), 0.2, 7)
    x = rng.standard_normal((30, 2))
    before = net.eval_np(x)
    pi = rng.permutation(16)
    net.w1.value[...] = net.w1.value[pi]
    net.b1.value[...] = net.b1.value[pi]
    net.w2.value[...] = net.w2.value[np.ix_(pi, pi)]
    net.b2.value[...] = net.b2.value[pi]
    net.w3.value[...] = net.w3.value[np.ix_(pi, pi)]
    net.b3.value[...] = net.b3.value[pi]
    net.w_out.value[...] = net.w_out.value[:, pi]
    after = net.eval_np(x)
    assert np.allclose(before, after, rtol=1e-12, atol=0)


def test_overflow_raises_helpful_error():
    net = ObstacleNet(ObstacleConfig(dim=1, width=8, seed=0))
    net.b_out.value[:] = 800.0
    with pytest.raises(NumericalError, match="weight scale"):
        net.eval_np(np.zeros((3, 1)))


def test_eval_deterministic(rng):
    net = perturb(ObstacleNet(ObstacleConfig(dim=2, width=16, seed=1)), 0.1, 2)
    x = rng.standard_normal((40, 2))
    assert np.array_equal(net.eval_np(x), net.eval_np(x))


def test_save_load_roundtrip(tmp_path, rng):
    net = perturb(ObstacleNet(ObstacleConfig(dim=3, width=16, seed=2)), 0.1, 3)
    path = str(tmp_path / "phi.bin")
    net.save(path, seed=1)
    net2 = ObstacleNet.load(path)
    x = rng.standard_normal((10, 3))
    assert np.array_equal(net.eval_np(x), net2.eval_np(x))


# -- grids ---------------------------------------------------------------------

def test_constant_field_on_grid():
    vals, grid = field_on_grid(lambda x: np.full(x.shape[0], 3.5), [-1, -1], [1, 1], 5)
    assert vals.shape == (25,)
    assert np.all(vals == 3.5)
    assert grid.shape == (5, 5)


def test_grid_matches_pointwise_density():
    scene = builtin_scene("two_bars")
    vals, grid = field_on_grid(scene.obstacle_true, scene.domain_lo, scene.domain_hi, 30)
    assert vals.shape == (900,)
    assert np.array_equal(vals, scene.obstacle_true.density(grid.points))


def test_grid_resolution_one_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        make_grid([-1.0], [1.0], 1)


def test_grid_cap():
    with pytest.raises(ValueError, match="Monte-Carlo"):
        make_grid(np.full(5, -3.0), np.full(5, 3.0), 200)
    assert GRID_POINT_CAP == 10_000_000


def test_field_values_dispatch(rng):
    scene = builtin_scene("gaussian_d2")
    net = ObstacleNet(ObstacleConfig(dim=2, width=8, seed=0))
    x = rng.standard_normal((5, 2))
    assert np.allclose(field_values(net, x), 1.0)
    assert np.array_equal(field_values(scene.obstacle_true, x),
                          scene.obstacle_true.density(x))
    assert np.allclose(field_values(lambda p: np.ones(p.shape[0]), x), 1.0)

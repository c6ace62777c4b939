"""Acceptance suite: one test per release criterion, slow end-to-end runs
included.  Each test prints a single PASS line with its measured numbers
(run pytest with -s or check test_output.txt).

The end-to-end thresholds are desk-scale targets established by the
reference runs in this repository; they are far looser than what large
training budgets reach, but they exercise the full pipeline.
"""

import json
import time
import tracemalloc

import numpy as np
import pytest
from scipy.special import erf
from scipy.stats import norm

from mfgflow import autodiff as ad
from mfgflow.bilevel import (BilevelConfig, BilevelState, approx_H, penalty_objective,
                             run_bilevel, simpson_integrate)
from mfgflow.cli import main as cli_main
from mfgflow.data import TrajectoryBatch, generate_dataset, load_batch, save_batch
from mfgflow.evaluate import obstacle_rel_l2, traj_mse
from mfgflow.flows import FlowConfig, FlowStack, stack_forward
from mfgflow.objectives import mfg_loss, terminal_jeffreys, trajectory_fit_loss
from mfgflow.rng import stream
from mfgflow.scenes import Scene, builtin_scene
from mfgflow.training import TrainConfig, pretrain_mle, solve_forward

from conftest import make_shift_stack, perturb


def report(name: str, detail: str):
    print(f"ACCEPTANCE {name}: PASS ({detail})", flush=True)


# -- 1. autodiff gradients -------------------------------------------------------

def test_autodiff_fd():
    t0 = time.time()
    rng = np.random.default_rng(2)
    w1 = ad.Parameter("w1", rng.standard_normal((16, 6)) * 0.4)
    b1 = ad.Parameter("b1", rng.standard_normal(16) * 0.1)
    w2 = ad.Parameter("w2", rng.standard_normal((1, 16)) * 0.4)
    b2 = ad.Parameter("b2", np.zeros(1))
    x = ad.constant(rng.standard_normal((20, 6)))

    def mlp_loss():
        h = ad.tanh(ad.linear(x, w1.node(), b1.node()))
        return ad.nsum(ad.square(ad.linear(h, w2.node(), b2.node())))

    mlp_err = ad.fd_check(mlp_loss, [w1, b1, w2, b2], step=1e-5)
    assert mlp_err < 1e-5

    gd2 = builtin_scene("gaussian_d2")
    prng = np.random.default_rng(111)
    st = perturb(FlowStack(FlowConfig(dim=2, steps=2, width=8, seed=1)), 0.05, 211)
    from mfgflow.obstacle import ObstacleConfig, ObstacleNet

    phi = perturb(ObstacleNet(ObstacleConfig(dim=2, width=16, seed=2)), 0.05, 311)
    x0 = gd2.p0.sample(prng, 6)
    y1 = gd2.p1.sample(prng, 6)

    def tiny_mfg():
        return mfg_loss(st, phi, gd2, x0, y1)[0]

    mfg_err = ad.fd_check(tiny_mfg, st.parameters() + phi.parameters(), step=1e-6)
    assert mfg_err < 1e-4
    dt = time.time() - t0
    assert dt < 5.0
    report("autodiff-fd", f"mlp {mlp_err:.2e}, mfg {mfg_err:.2e}, {dt:.1f}s")


# -- 2. invertibility --------------------------------------------------------------

def test_flow_invertibility():
    t0 = time.time()
    worst_rt = 0.0
    rng = np.random.default_rng(0)
    for transform, pert in (("affine", 0.1), ("rqs", 0.03)):
        for d in (1, 2, 3, 5, 10):
            scale = pert * (0.4 if d >= 10 else 1.0)
            st = perturb(FlowStack(FlowConfig(dim=d, steps=3, transform=transform,
                                              width=16, seed=7)), scale, d)
            x = rng.standard_normal((10_000, d)) * 2
            path, _ = stack_forward(st, x)
            xr, _ = st.inverse_np(path[:, -1])
            worst_rt = max(worst_rt, float(np.abs(xr - x).max()))
    assert worst_rt < 1e-8

    st = perturb(FlowStack(FlowConfig(dim=2, steps=2, width=16, seed=3)), 0.1, 5)
    worst_ld = 0.0
    for pt in ([0.3, -0.7], [1.2, 0.4], [-1.5, 2.0], [0.0, 0.0]):
        x0 = np.array([pt])
        _, ld = stack_forward(st, x0)
        eps = 1e-6
        jac = np.zeros((2, 2))
        for j in range(2):
            xp, xm = x0.copy(), x0.copy()
            xp[0, j] += eps
            xm[0, j] -= eps
            jac[:, j] = (stack_forward(st, xp)[0][0, -1] - stack_forward(st, xm)[0][0, -1]) / (2 * eps)
        worst_ld = max(worst_ld, abs(np.log(abs(np.linalg.det(jac))) - ld[0].sum()))
    assert worst_ld < 1e-5
    dt = time.time() - t0
    assert dt < 30.0
    report("flow-invertibility", f"roundtrip {worst_rt:.2e}, logdet-vs-fd {worst_ld:.2e}, {dt:.1f}s")


# -- 3. KL oracle -----------------------------------------------------------------

def test_kl_oracle():
    t0 = time.time()
    gd2 = builtin_scene("gaussian_d2")
    matched = Scene(name="m", d=2, steps=4, p0=gd2.p0, p1=gd2.p0,
                    obstacle_true=gd2.obstacle_true, domain_lo=gd2.domain_lo,
                    domain_hi=gd2.domain_hi, lam_transport=1, lam_interaction=1,
                    lam_terminal=5)
    rng = np.random.default_rng(4)
    ident = FlowStack(FlowConfig(dim=2, steps=4, width=8, seed=0))
    x0 = matched.p0.sample(rng, 2048)
    y1 = matched.p1.sample(rng, 2048)
    fwd, rev = terminal_jeffreys(ident, matched, x0, y1)
    # matched densities: the pointwise estimator vanishes, well within 3 SE
    assert abs(fwd.item()) < 1e-10 and abs(rev.item()) < 1e-10

    from mfgflow.scenes import GaussianMixtureField

    mu = np.array([1.2, -0.5])
    p0 = GaussianMixtureField(1.0, [1.0], [np.zeros(2)], [np.ones(2)])
    p1 = GaussianMixtureField(1.0, [1.0], [mu], [np.ones(2)])
    shift = Scene(name="s", d=2, steps=4, p0=p0, p1=p1, obstacle_true=p1,
                  domain_lo=[-3, -3], domain_hi=[3, 3], lam_transport=1,
                  lam_interaction=1, lam_terminal=1)
    n = 8192
    x0 = p0.sample(rng, n)
    fwd, _ = terminal_jeffreys(FlowStack(FlowConfig(dim=2, steps=4, width=8, seed=0)),
                               shift, x0, p1.sample(rng, n))
    per = p0.logdensity(x0) - p1.logdensity(x0)
    se = float(per.std() / np.sqrt(n))
    err = abs(fwd.item() - float(mu @ mu) / 2)
    assert err < 3 * se
    dt = time.time() - t0
    assert dt < 30.0
    report("kl-oracle", f"mean-shift err {err:.3g} < 3SE {3 * se:.3g}, {dt:.1f}s")


# -- 4. quadrature ------------------------------------------------------------------

def test_quadrature():
    t0 = time.time()
    assert simpson_integrate(np.ones((31, 31)), [-3, -3], [3, 3]) == pytest.approx(36.0, abs=1e-12)
    axis = np.linspace(-2, 2, 21)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    assert abs(simpson_integrate(xx ** 3 + yy ** 3, [-2, -2], [2, 2])) < 1e-12
    ax1 = np.linspace(0, 1, 11)
    assert simpson_integrate(4 * ax1 ** 3 + 2 * ax1, [0.0], [1.0]) == pytest.approx(2.0, abs=1e-12)

    axis = np.linspace(-6, 6, 61)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    vals = np.exp(-0.5 * (xx ** 2 + yy ** 2)) / (2 * np.pi)
    gauss_err = abs(simpson_integrate(vals, [-6, -6], [6, 6]) - erf(6 / np.sqrt(2)) ** 2)
    assert gauss_err < 1e-6
    dt = time.time() - t0
    assert dt < 5.0
    report("quadrature", f"gaussian-vs-erf {gauss_err:.2e}, {dt:.1f}s")


# -- 5. penalty mechanics -------------------------------------------------------------

def test_penalty_mechanics():
    t0 = time.time()
    gd2 = builtin_scene("gaussian_d2")
    flow_cfg = FlowConfig(dim=2, steps=3, width=8, seed=0)
    init = perturb(FlowStack(flow_cfg), 0.05, 2)

    # hinge exactly zero at matched parameters with shared batches
    state = BilevelState(gd2, init, BilevelConfig(
        inner_steps=0, batch_lower=16, batch_hinge=24, fit_batch=32,
        obstacle_width=16, seed=0))
    for a, b in zip(state.theta.parameters(), state.theta_tilde.parameters()):
        b.value[...] = a.value
    rng = np.random.default_rng(1)
    h_batch = (gd2.p0.sample(rng, 24), gd2.p1.sample(rng, 24))
    pts = generate_dataset(make_shift_stack(2, 3, [0.0, -6.0]), gd2, 24,
                           stream(3, "pm")).points
    h = approx_H(state, gd2, [], h_batch)
    _, diag = penalty_objective(state, gd2, pts, h_batch, h)
    assert diag["hinge"] == 0.0

    # penalty off: bit-identical continuation of plain trajectory fitting
    pre_cfg = TrainConfig(steps=8, fit_batch=24, lr=3e-4, seed=7)
    theta0 = pretrain_mle(pts, flow_cfg, pre_cfg)
    cfg = BilevelConfig(outer_steps=10, lambda_p=0.0, lambda_m=0.0, fit_batch=24,
                        seed=7, checkpoint_every=0, rel_l2_every=1000, obstacle_width=16)
    theta, _, _ = run_bilevel(TrajectoryBatch(pts, 1.0 / 3), gd2, theta0, cfg)
    cont = pretrain_mle(pts, flow_cfg,
                        TrainConfig(steps=10, fit_batch=24, lr=3e-4, seed=7),
                        init_stack=theta0.copy())
    for a, b in zip(theta.parameters(), cont.parameters()):
        assert np.array_equal(a.value, b.value)

    # memory per outer step does not grow with the inner step count
    import gc

    peaks = {}
    for inner_steps in (10, 50, 200):
        st = BilevelState(gd2, init, BilevelConfig(
            inner_steps=inner_steps, batch_lower=16, batch_hinge=24,
            obstacle_width=16, seed=0))
        inner = []
        for i in range(inner_steps):
            g = stream(0, "memacc", i)
            inner.append((gd2.p0.sample(g, 16), gd2.p1.sample(g, 16)))
        g = stream(0, "memacc-h")
        hb = (gd2.p0.sample(g, 24), gd2.p1.sample(g, 24))
        approx_H(st, gd2, inner, hb)
        gc.collect()
        tracemalloc.start()
        approx_H(st, gd2, inner, hb)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        peaks[inner_steps] = peak
    assert peaks[200] < 3 * peaks[10]
    dt = time.time() - t0
    assert dt < 300.0
    report("penalty-mechanics",
           f"hinge 0 at matched params; naive mode bit-identical; "
           f"peaks {peaks[10]}/{peaks[50]}/{peaks[200]} B, {dt:.1f}s")


# -- 6. MLE equivalence ----------------------------------------------------------------

def test_mle_equivalence():
    rng = np.random.default_rng(9)
    st = perturb(FlowStack(FlowConfig(dim=3, steps=4, width=8, seed=0)), 0.08, 12)
    x0 = rng.standard_normal((14, 3))
    targets = rng.standard_normal((14, 5, 3))
    targets[:, 0] = x0
    fit = trajectory_fit_loss(st, targets).item()
    path, _ = st.forward_np(x0)
    loglik = sum(norm.logpdf(targets[:, k], loc=path[:, k], scale=1.0).sum()
                 for k in range(1, 5))
    n, k, d = 14, 4, 3
    expected = -(2.0 / (n * k)) * loglik - d * np.log(2 * np.pi)
    rel = abs(fit - expected) / abs(expected)
    assert rel < 1e-10
    report("mle-equivalence", f"rel err {rel:.2e}")


# -- shared desk pipeline ----------------------------------------------------------------

DESK_SEED = 0


def _desk_pipeline(scene_name: str, tmp_root, n_total=4000, n_train=3000,
                   forward_steps=3000, pretrain_steps=2000, outer_steps=2000):
    """forward solve -> dataset -> pretrain -> invert; returns artifacts."""
    scene = builtin_scene(scene_name)
    flow_cfg = FlowConfig(dim=scene.d, steps=8, width=64, seed=DESK_SEED)
    t0 = time.time()
    fwd, _ = solve_forward(scene, flow_cfg,
                           TrainConfig(steps=forward_steps, batch_p0=512, batch_p1=512,
                                       lr=1e-3, seed=DESK_SEED))
    data = generate_dataset(fwd, scene, n_total, stream(DESK_SEED, "sample"),
                            provenance={"seed": DESK_SEED})
    train = TrajectoryBatch(data.points[:n_train], data.dt)
    test = TrajectoryBatch(data.points[n_train:], data.dt)
    theta0 = pretrain_mle(train.points, flow_cfg,
                          TrainConfig(steps=pretrain_steps, fit_batch=512, lr=1e-3,
                                      seed=DESK_SEED))
    cfg = BilevelConfig(outer_steps=outer_steps, seed=DESK_SEED, checkpoint_every=0,
                        rel_l2_every=200)
    run_dir = str(tmp_root / f"run_{scene_name}")
    theta, phi, history = run_bilevel(train, scene, theta0, cfg, out_dir=run_dir)
    wall = time.time() - t0
    return dict(scene=scene, fwd=fwd, data=data, train=train, test=test,
                theta=theta, phi=phi, history=history, wall=wall, run_dir=run_dir)


@pytest.fixture(scope="session")
def desk_gd2(tmp_path_factory):
    return _desk_pipeline("gaussian_d2", tmp_path_factory.mktemp("accept_gd2"))


# -- 7. end-to-end inverse, gaussian_d2 ------------------------------------------------------

def test_e2e_gaussian_d2(desk_gd2):
    rel = obstacle_rel_l2(desk_gd2["phi"], desk_gd2["scene"], 100)
    wall_min = desk_gd2["wall"] / 60
    # trained stacks stay well-conditioned: invertibility at the solution
    x = desk_gd2["train"].points[:2000, 0]
    path, _ = desk_gd2["theta"].forward_np(x)
    xr, _ = desk_gd2["theta"].inverse_np(path[:, -1])
    rt = float(np.abs(xr - x).max())
    assert rel <= 0.25, f"rel-L2 {rel:.3f}"
    assert wall_min <= 30.0, f"wall {wall_min:.1f} min"
    assert rt < 1e-8
    report("e2e-gaussian-d2", f"rel-L2 {rel:.3f} <= 0.25, wall {wall_min:.1f} min, "
                              f"trained roundtrip {rt:.1e}")


# -- 8. end-to-end inverse, two_bars ----------------------------------------------------------

def test_e2e_two_bars(tmp_path_factory):
    art = _desk_pipeline("two_bars", tmp_path_factory.mktemp("accept_tb"))
    rel = obstacle_rel_l2(art["phi"], art["scene"], 100)
    wall_min = art["wall"] / 60
    assert rel <= 0.35, f"rel-L2 {rel:.3f}"
    assert wall_min <= 45.0, f"wall {wall_min:.1f} min"
    report("e2e-two-bars", f"rel-L2 {rel:.3f} <= 0.35, wall {wall_min:.1f} min")


# -- 9. dimension robustness ------------------------------------------------------------------

def test_e2e_gaussian_d5(desk_gd2, tmp_path_factory):
    art = _desk_pipeline("gaussian_d5", tmp_path_factory.mktemp("accept_d5"))
    rel5 = obstacle_rel_l2(art["phi"], art["scene"], 100)
    rel2 = obstacle_rel_l2(desk_gd2["phi"], desk_gd2["scene"], 100)
    wall_min = art["wall"] / 60
    assert np.isfinite(rel5)
    assert rel5 <= 2.0 * rel2, f"d5 {rel5:.3f} vs d2 {rel2:.3f}"
    assert wall_min <= 60.0, f"wall {wall_min:.1f} min"
    report("dimension-robustness", f"d5 rel-L2 {rel5:.3f} <= 2 x d2 {rel2:.3f}, "
                                   f"wall {wall_min:.1f} min")


# -- 10. scarce-data regularization -------------------------------------------------------------

def test_scarce_data(desk_gd2, tmp_path):
    t0 = time.time()
    data_path = str(tmp_path / "gd2.traj")
    save_batch(desk_gd2["data"], data_path)
    out_csv = str(tmp_path / "scarce.csv")
    code = cli_main(["compare-scarce", "--scene", "gaussian_d2", "--data", data_path,
                     "--sizes", "3000,300,100,50", "--out", out_csv,
                     "--seed", str(DESK_SEED)])
    assert code == 0
    rows = {}
    lines = open(out_csv).read().splitlines()
    for line in lines[1:]:
        vals = line.split(",")
        rows[int(vals[0])] = [float(v) for v in vals[1:]]
    wall_min = (time.time() - t0) / 60
    for size in (50, 100):
        naive_test, blo_test = rows[size][1], rows[size][3]
        assert blo_test < naive_test, f"size {size}: {blo_test} vs {naive_test}"
    assert wall_min <= 90.0
    report("scarce-data", "; ".join(
        f"n={s}: penalty {rows[s][3]:.3g} < naive {rows[s][1]:.3g}" for s in (50, 100))
        + f"; wall {wall_min:.1f} min")


# -- 11. determinism -------------------------------------------------------------------------------

def test_determinism(tmp_path):
    scene = builtin_scene("gaussian_d2")
    flow_cfg = FlowConfig(dim=2, steps=3, width=8, seed=0)
    tc = TrainConfig(steps=20, batch_p0=32, batch_p1=32, seed=5)

    s1, _ = solve_forward(scene, flow_cfg, tc)
    s2, _ = solve_forward(scene, flow_cfg, tc)
    for a, b in zip(s1.parameters(), s2.parameters()):
        assert np.array_equal(a.value, b.value)

    d1 = generate_dataset(s1, scene, 40, stream(3, "sample"))
    d2 = generate_dataset(s2, scene, 40, stream(3, "sample"))
    assert np.array_equal(d1.points, d2.points)

    p1 = pretrain_mle(d1.points, flow_cfg, TrainConfig(steps=15, fit_batch=32, seed=2))
    p2 = pretrain_mle(d2.points, flow_cfg, TrainConfig(steps=15, fit_batch=32, seed=2))
    for a, b in zip(p1.parameters(), p2.parameters()):
        assert np.array_equal(a.value, b.value)

    kw = dict(inner_steps=3, batch_lower=12, batch_hinge=16, fit_batch=24,
              seed=2, rel_l2_every=1000, obstacle_width=16)
    b1 = run_bilevel(d1, scene, p1, BilevelConfig(outer_steps=8, checkpoint_every=0, **kw))
    b2 = run_bilevel(d2, scene, p2, BilevelConfig(outer_steps=8, checkpoint_every=0, **kw))
    for a, b in zip(b1[0].parameters(), b2[0].parameters()):
        assert np.array_equal(a.value, b.value)
    for a, b in zip(b1[1].parameters(), b2[1].parameters()):
        assert np.array_equal(a.value, b.value)

    # checkpoint resume continues bit-identically for >= 10 further steps
    half = str(tmp_path / "half")
    run_bilevel(d1, scene, p1, BilevelConfig(outer_steps=4, checkpoint_every=4, **kw),
                out_dir=half)
    full = run_bilevel(d1, scene, p1, BilevelConfig(outer_steps=14, checkpoint_every=0, **kw))
    resumed = run_bilevel(d1, scene, p1, BilevelConfig(outer_steps=14, checkpoint_every=0, **kw),
                          resume_from=f"{half}/checkpoints/4.bin")
    for a, b in zip(full[0].parameters(), resumed[0].parameters()):
        assert np.array_equal(a.value, b.value)
    for a, b in zip(full[1].parameters(), resumed[1].parameters()):
        assert np.array_equal(a.value, b.value)
    report("determinism", "forward/sample/pretrain/invert bit-reproducible; "
                          "resume identical for 10 further steps")

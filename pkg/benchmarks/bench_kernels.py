"""Compare the compiled kernel backend against the numpy fallback.

Run:  python benchmarks/bench_kernels.py
The fallback is forced per-call (both backends are importable side by
side), so one process covers both columns.
"""

import time

import numpy as np

from mfgflow.kernels import _ref, backend


def timeit(fn, *args, reps=200):
    fn(*args)
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best * 1e6


def row(name, fast, slow):
    ratio = slow / fast if fast > 0 else float("inf")
    print(f"{name:34s} {fast:10.1f} {slow:10.1f} {ratio:8.2f}x")


def main():
    rng = np.random.default_rng(0)
    if backend is _ref:
        print("compiled backend not available; benchmarking the fallback against itself")
    print(f"{'kernel':34s} {'compiled us':>10s} {'numpy us':>10s} {'speedup':>9s}")

    x = rng.standard_normal((512, 64))
    g = rng.standard_normal((512, 64))
    row("relu fwd+bwd (512x64)",
        timeit(lambda: backend.relu_bwd(g, backend.relu_fwd(x))),
        timeit(lambda: _ref.relu_bwd(g, _ref.relu_fwd(x))))

    # the transform acts on the coupled half of the coordinates (d/2 wide)
    xs = rng.standard_normal((512, 2))
    s = rng.standard_normal((512, 2))
    t = rng.standard_normal((512, 2))
    row("affine transform fwd (512x2)",
        timeit(lambda: backend.exp_scale_shift_fwd(xs, s, t)),
        timeit(lambda: _ref.exp_scale_shift_fwd(xs, s, t)))

    n, a, h, m = 128, 1, 64, 1
    w = [rng.standard_normal((h, a)), rng.standard_normal(h),
         rng.standard_normal((h, h)), rng.standard_normal(h),
         rng.standard_normal((2 * m, h)), rng.standard_normal(2 * m)]
    xa = rng.standard_normal((n, a))
    xb = rng.standard_normal((n, m))
    row("coupling fwd (128, width 64)",
        timeit(lambda: backend.couple_fwd(xa, xb, w, 3.0)),
        timeit(lambda: _ref.couple_fwd(xa, xb, w, 3.0)))

    _, sc, caches_c = backend.couple_fwd(xa, xb, w, 3.0)
    _, sr, caches_r = _ref.couple_fwd(xa, xb, w, 3.0)
    ds = rng.standard_normal((n, m))
    dt = rng.standard_normal((n, m))
    row("coupling bwd (128, width 64)",
        timeit(lambda: backend.couple_back(ds, dt, caches_c, w, xa)),
        timeit(lambda: _ref.couple_back(ds, dt, caches_r, w, xa)))

    p = rng.standard_normal(10_000)
    gr = rng.standard_normal(10_000)
    m1, v1 = np.zeros_like(p), np.zeros_like(p)
    p2, m2, v2 = p.copy(), m1.copy(), v1.copy()
    row("adam update (10k params)",
        timeit(lambda: backend.adam_update(p, gr, m1, v1, 3, 1e-3, 0.9, 0.999, 1e-8)),
        timeit(lambda: _ref.adam_update(p2, gr, m2, v2, 3, 1e-3, 0.9, 0.999, 1e-8)))

    pts = rng.standard_normal((1024, 2))
    means = rng.standard_normal((4, 2))
    variances = rng.uniform(0.3, 1.5, (4, 2))
    lw = np.log(np.full(4, 0.25))
    row("mixture logpdf (1024x2, 4 comps)",
        timeit(lambda: backend.gm_logpdf_fwd(pts, means, variances, lw)),
        timeit(lambda: _ref.gm_logpdf_fwd(pts, means, variances, lw)))

    # end-to-end: one loss evaluation with gradients under each backend
    from mfgflow import autodiff as ad
    from mfgflow.flows import FlowConfig, FlowStack
    from mfgflow.obstacle import ObstacleConfig, ObstacleNet
    from mfgflow.objectives import mfg_loss
    from mfgflow.scenes import builtin_scene

    scene = builtin_scene("gaussian_d2")
    stack = FlowStack(FlowConfig(dim=2, steps=8, width=64, seed=0))
    prng = np.random.default_rng(3)
    for q in stack.parameters():
        q.value += 0.05 * prng.standard_normal(q.value.shape)
    phi = ObstacleNet(ObstacleConfig(dim=2, width=128, seed=0))
    x0 = scene.p0.sample(prng, 64)
    y1 = scene.p1.sample(prng, 64)
    params = stack.parameters()

    def step():
        for q in params:
            q.zero_grad()
        total, _ = mfg_loss(stack, phi, scene, x0, y1)
        ad.backward(total, params)

    active = timeit(step, reps=40)
    name = "full loss step (fwd+bwd, M=64)"
    if backend is _ref:
        print(f"{name:34s} {'-':>10s} {active:10.1f}")
    else:
        # fallback column from a child process with the fallback forced
        import os
        import subprocess
        import sys

        env = dict(os.environ, MFGFLOW_PURE_PYTHON="1")
        out = subprocess.run(
            [sys.executable, __file__, "--full-step-only"], env=env,
            capture_output=True, text=True, check=True).stdout.strip()
        row(name, active, float(out))


if __name__ == "__main__":
    import sys

    if "--full-step-only" in sys.argv:
        # timed by the parent: print the full-step time under this backend
        import numpy as _np

        from mfgflow import autodiff as ad
        from mfgflow.flows import FlowConfig, FlowStack
        from mfgflow.obstacle import ObstacleConfig, ObstacleNet
        from mfgflow.objectives import mfg_loss
        from mfgflow.scenes import builtin_scene

        scene = builtin_scene("gaussian_d2")
        stack = FlowStack(FlowConfig(dim=2, steps=8, width=64, seed=0))
        prng = _np.random.default_rng(3)
        for q in stack.parameters():
            q.value += 0.05 * prng.standard_normal(q.value.shape)
        phi = ObstacleNet(ObstacleConfig(dim=2, width=128, seed=0))
        x0 = scene.p0.sample(prng, 64)
        y1 = scene.p1.sample(prng, 64)
        params = stack.parameters()

        def step():
            for q in params:
                q.zero_grad()
            total, _ = mfg_loss(stack, phi, scene, x0, y1)
            ad.backward(total, params)

        print(timeit(step, reps=40))
    else:
        main()

import hashlib
import os

import numpy as np
import pytest

from plotviz import HeaderError, PlotJob, read_obstacle_grid, read_trajectories, render
from plotviz.cli import main


def _write_grid_csv(path, n=20):
    xs = np.linspace(-3, 3, n)
    with open(path, "w") as fh:
        fh.write("x,y,b_est,b_true\n")
        for x in xs:
            for y in xs:
                true = 8.0 * np.exp(-(x ** 2 + 2 * y ** 2) / 2)
                est = true * 0.9 + 0.2
                fh.write(f"{float(x)!r},{float(y)!r},{float(est)!r},{float(true)!r}\n")
    return path


def _write_traj_csv(path, n_paths=12, steps=5, d=2, with_series=True):
    rng = np.random.default_rng(3)
    with open(path, "w") as fh:
        coords = ",".join(f"x_{j + 1}" for j in range(d))
        fh.write(f"n,k,t,{coords}" + (",series\n" if with_series else "\n"))
        for series in (("observed", "predicted") if with_series else (None,)):
            for i in range(n_paths):
                x = rng.standard_normal(d)
                for k in range(steps + 1):
                    pos = x + k * np.array([0.0, -1.0] + [0.0] * (d - 2))
                    row = f"{i},{k},{k / steps!r}," + ",".join(repr(float(v)) for v in pos)
                    fh.write(row + (f",{series}\n" if with_series else "\n"))
    return path


def _write_scarce_csv(path):
    with open(path, "w") as fh:
        fh.write("n_train,naive_train_mse,naive_test_mse,blo_train_mse,blo_test_mse\n")
        for n, nt, ne, bt, be in ((50, 1e-4, 0.9, 3e-3, 0.12),
                                  (100, 2e-4, 0.5, 3e-3, 0.08),
                                  (300, 5e-4, 0.1, 2e-3, 0.04),
                                  (3000, 1e-3, 0.01, 1.5e-3, 0.008)):
            fh.write(f"{n},{nt},{ne},{bt},{be}\n")
    return path


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.mark.parametrize("kind", ["heatmap-overlay", "slices-3d", "projection-2d",
                                  "scarce-curves"])
def test_render_all_kinds_headless(kind, tmp_path):
    grid = _write_grid_csv(str(tmp_path / "grid.csv"))
    traj = _write_traj_csv(str(tmp_path / "traj.csv"))
    scarce = _write_scarce_csv(str(tmp_path / "scarce.csv"))
    inputs = {
        "heatmap-overlay": [grid, traj],
        "slices-3d": [grid, grid],
        "projection-2d": [traj, grid],
        "scarce-curves": [scarce],
    }[kind]
    before = [_sha(p) for p in inputs]
    out = str(tmp_path / f"{kind}.png")
    assert render(PlotJob(kind=kind, inputs=inputs, output=out)) == out
    assert os.path.getsize(out) > 1000
    assert [_sha(p) for p in inputs] == before, "rendering must not touch inputs"


def test_cli_exit_codes(tmp_path):
    grid = _write_grid_csv(str(tmp_path / "grid.csv"))
    out = str(tmp_path / "o.png")
    assert main(["plot", "slices-3d", "--in", grid, "--out", out]) == 0
    assert os.path.getsize(out) > 0
    assert main(["plot", "nope", "--in", grid, "--out", out]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["plot", "heatmap-overlay", "--in", str(bad), "--out", out]) == 1


def test_header_validation(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,b_est\n0,0,1\n")
    with pytest.raises(HeaderError, match="b_true"):
        read_obstacle_grid(str(bad))


def test_grid_reader_shapes(tmp_path):
    grid = _write_grid_csv(str(tmp_path / "grid.csv"), n=7)
    xs, ys, est, true = read_obstacle_grid(grid)
    assert xs.shape == (7,) and est.shape == (7, 7)
    assert np.all(est >= 0) and true.max() > 1


def test_trajectory_reader_series(tmp_path):
    traj = _write_traj_csv(str(tmp_path / "t.csv"), n_paths=4, steps=3, d=3)
    series = read_trajectories(traj)
    assert set(series) == {"observed", "predicted"}
    assert series["observed"].shape == (4, 4, 3)


def test_projection_high_dim(tmp_path):
    traj = _write_traj_csv(str(tmp_path / "t5.csv"), d=5)
    out = str(tmp_path / "proj.png")
    assert render(PlotJob(kind="projection-2d", inputs=[traj], output=out)) == out
    assert os.path.getsize(out) > 1000


def test_subsample_cap(tmp_path):
    traj = _write_traj_csv(str(tmp_path / "big.csv"), n_paths=50)
    grid = _write_grid_csv(str(tmp_path / "grid.csv"))
    out = str(tmp_path / "o.png")
    job = PlotJob(kind="heatmap-overlay", inputs=[grid, traj], output=out, max_paths=10)
    assert render(job) == out

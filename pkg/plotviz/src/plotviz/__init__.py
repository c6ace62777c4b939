"""Offline figures from exported run CSVs.

Four job kinds, all headless (file output only):

* ``heatmap-overlay``: truth and estimate heatmaps side by side from an
  obstacle-grid CSV (x,y,b_est,b_true), with observed/predicted
  trajectories overlaid from a trajectories CSV.
* ``slices-3d``: contour panels, one per obstacle-grid CSV (axis-aligned
  slices of a 3D field).
* ``projection-2d``: trajectories projected onto the first two
  coordinates, optionally over an obstacle slice.
* ``scarce-curves``: train/test MSE against training-set size for the
  naive and penalty runs, log-log.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("heatmap-overlay", "slices-3d", "projection-2d", "scarce-curves")


class HeaderError(ValueError):
    def __init__(self, path, expected, got):
        super().__init__(f"{path}: expected columns {expected}, got {got}")


def _read_csv(path: str, required: tuple[str, ...]) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    missing = [c for c in required if c not in header]
    if missing:
        raise HeaderError(path, required, tuple(header))
    data = np.asarray(rows, dtype=object)
    out = {}
    for name in header:
        col = data[:, header.index(name)]
        try:
            out[name] = col.astype(np.float64)
        except ValueError:
            out[name] = col.astype(str)
    return out


def read_obstacle_grid(path: str):
    cols = _read_csv(path, ("x", "y", "b_est", "b_true"))
    xs = np.unique(cols["x"])
    ys = np.unique(cols["y"])
    shape = (len(xs), len(ys))
    order = np.lexsort((cols["y"], cols["x"]))
    est = cols["b_est"][order].reshape(shape)
    true = cols["b_true"][order].reshape(shape)
    return xs, ys, est, true


def read_trajectories(path: str):
    """Returns {series name: array (paths, time, dim)} from the long format."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    coord_cols = tuple(c for c in header if c.startswith("x_"))
    required = ("n", "k", "t") + coord_cols
    cols = _read_csv(path, required)
    series_col = cols.get("series", np.array(["observed"] * len(cols["n"])))
    out = {}
    for name in np.unique(series_col):
        sel = series_col == name
        ids = cols["n"][sel].astype(int)
        ks = cols["k"][sel].astype(int)
        coords = np.stack([cols[c][sel] for c in coord_cols], axis=1)
        paths = np.zeros((ids.max() + 1, ks.max() + 1, len(coord_cols)))
        paths[ids, ks] = coords
        out[str(name)] = paths
    return out


def _subsample(paths: np.ndarray, cap: int) -> np.ndarray:
    if len(paths) <= cap:
        return paths
    idx = np.linspace(0, len(paths) - 1, cap).astype(int)
    return paths[idx]


@dataclass
class PlotJob:
    kind: str
    inputs: list[str]
    output: str
    colormap: str = "viridis"
    max_paths: int = 200
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}; valid: {', '.join(KINDS)}")


def _overlay(ax, paths, color):
    for p in paths:
        ax.plot(p[:, 0], p[:, 1], color=color, lw=0.6, alpha=0.5)
    if len(paths):
        ax.plot(paths[:, 0, 0], paths[:, 0, 1], ".", color=color, ms=2)


def _render_heatmap_overlay(job: PlotJob):
    xs, ys, est, true = read_obstacle_grid(job.inputs[0])
    series = read_trajectories(job.inputs[1]) if len(job.inputs) > 1 else {}
    fig, axes = plt.subplots(1, 2, figsize=(11, 5), sharey=True)
    extent = (xs[0], xs[-1], ys[0], ys[-1])
    vmax = max(true.max(), est.max())
    for ax, fld, title, key in ((axes[0], true, "true field", "observed"),
                                (axes[1], est, "recovered field", "predicted")):
        im = ax.imshow(fld.T, origin="lower", extent=extent, cmap=job.colormap,
                       vmin=0.0, vmax=vmax, aspect="auto")
        ax.set_title(title)
        if key in series:
            _overlay(ax, _subsample(series[key], job.max_paths), "white")
    fig.colorbar(im, ax=axes, shrink=0.85)
    fig.savefig(job.output, dpi=130)
    plt.close(fig)


def _render_slices(job: PlotJob):
    n = len(job.inputs)
    fig, axes = plt.subplots(1, n, figsize=(5.2 * n, 4.6), squeeze=False)
    for i, path in enumerate(job.inputs):
        xs, ys, est, true = read_obstacle_grid(path)
        ax = axes[0][i]
        ax.contour(xs, ys, true.T, levels=8, cmap="Greys")
        cs = ax.contourf(xs, ys, est.T, levels=8, cmap=job.colormap, alpha=0.85)
        label = job.labels[i] if i < len(job.labels) else f"slice {i}"
        ax.set_title(f"{label} (shade: recovered, lines: true)")
        fig.colorbar(cs, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(job.output, dpi=130)
    plt.close(fig)


def _render_projection(job: PlotJob):
    series = read_trajectories(job.inputs[0])
    grid = read_obstacle_grid(job.inputs[1]) if len(job.inputs) > 1 else None
    fig, ax = plt.subplots(figsize=(6, 5.4))
    if grid is not None:
        xs, ys, est, _ = grid
        ax.imshow(est.T, origin="lower", extent=(xs[0], xs[-1], ys[0], ys[-1]),
                  cmap=job.colormap, aspect="auto")
    colors = {"observed": "white", "predicted": "deepskyblue"}
    for name, paths in sorted(series.items()):
        # first two coordinates only
        _overlay(ax, _subsample(paths[:, :, :2], job.max_paths),
                 colors.get(name, "orange"))
    ax.set_title("trajectories, first two coordinates")
    fig.savefig(job.output, dpi=130)
    plt.close(fig)


def _render_scarce(job: PlotJob):
    cols = _read_csv(job.inputs[0], ("n_train", "naive_train_mse", "naive_test_mse",
                                     "blo_train_mse", "blo_test_mse"))
    order = np.argsort(cols["n_train"])
    n = cols["n_train"][order]
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    styles = (("naive_train_mse", "tab:red", "--", "naive, train"),
              ("naive_test_mse", "tab:red", "-", "naive, test"),
              ("blo_train_mse", "tab:blue", "--", "penalty, train"),
              ("blo_test_mse", "tab:blue", "-", "penalty, test"))
    for col, color, ls, label in styles:
        ax.plot(n, cols[col][order], ls, color=color, marker="o", label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("training trajectories")
    ax.set_ylabel("trajectory MSE")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(job.output, dpi=130)
    plt.close(fig)


_RENDERERS = {
    "heatmap-overlay": _render_heatmap_overlay,
    "slices-3d": _render_slices,
    "projection-2d": _render_projection,
    "scarce-curves": _render_scarce,
}


def render(job: PlotJob) -> str:
    """Render one job; returns the output path."""
    _RENDERERS[job.kind](job)
    return job.output

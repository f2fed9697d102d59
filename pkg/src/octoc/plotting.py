"""Deterministic SVG output for trajectories and value-table contours."""
from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .hjb import SENTINEL, Grid  # noqa: E402


def _save(fig, path: str) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "octoc", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def contour_paths(grid: Grid, values: np.ndarray, levels: Sequence[float]) -> dict:
    """Polylines of ``{V = c}`` per level, with unreached nodes masked out."""
    if grid.ndim != 2:
        raise ValueError("contours need a 2-D slice")
    V = np.asarray(values, dtype=float).reshape(grid.shape)
    V = np.ma.masked_where(~np.isfinite(V) | (V >= SENTINEL), V)
    X, Y = grid.axes
    out = {}
    fig, ax = plt.subplots()
    for c in levels:
        if V.count() == 0 or not (V.min() < c < V.max()):
            out[float(c)] = []
            continue
        cs = ax.contour(X, Y, V.T, levels=[c])
        out[float(c)] = [np.asarray(seg) for seg in cs.allsegs[0] if len(seg) > 1]
    plt.close(fig)
    return out


def export_plot(path: str, trajectory=None, grid: Optional[Grid] = None, values=None,
                levels: Sequence[float] = (), target=None, title: str = "") -> None:
    """Trajectory overlay (state axes 0 and 1) on optional value contours."""
    has_traj = trajectory is not None and len(trajectory.states)
    has_table = grid is not None and values is not None
    if not (has_traj or has_table):
        raise ValueError("nothing to plot")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if has_table:
        for c, segs in contour_paths(grid, values, levels).items():
            for seg in segs:
                ax.plot(seg[:, 0], seg[:, 1], color="0.5", lw=0.8)
    if has_traj:
        S = np.asarray(trajectory.states)
        S = S[np.all(np.isfinite(S), axis=1)]
        if S.shape[1] >= 2:
            ax.plot(S[:, 0], S[:, 1], color="C0", lw=1.5)
        else:
            ax.plot(np.asarray(trajectory.times)[: len(S)], S[:, 0], color="C0", lw=1.5)
    if target is not None:
        ax.plot([target[0]], [target[1]], marker="x", color="C3", ms=8)
    if title:
        ax.set_title(title)
    _save(fig, path)

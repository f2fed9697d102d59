import xml.etree.ElementTree as ET

import numpy as np
import pytest

from octoc.core import Trajectory
from octoc.hjb import SENTINEL, Grid
from octoc.plotting import contour_paths, export_plot


def radial_grid():
    grid = Grid((-1.0, -1.0), (1.0, 1.0), (41, 41))
    X, Y = grid.mesh()
    return grid, np.hypot(X, Y)


def test_constant_table_has_no_contours(tmp_path):
    grid = Grid((0.0, 0.0), (1.0, 1.0), (5, 5))
    V = np.full(grid.shape, 2.0)
    assert contour_paths(grid, V, [2.0]) == {2.0: []}
    path = tmp_path / "flat.svg"
    export_plot(str(path), grid=grid, values=V, levels=[2.0])
    assert ET.parse(path).getroot().tag.endswith("svg")


def test_circle_contours_lie_on_level():
    grid, V = radial_grid()
    for c, segs in contour_paths(grid, V, [0.25, 0.5, 0.75]).items():
        assert segs
        pts = np.vstack(segs)
        # linear interpolation of a cone is accurate to O(dx^2 / r)
        assert np.max(np.abs(np.hypot(pts[:, 0], pts[:, 1]) - c)) <= 0.01


def test_unreached_nodes_are_masked():
    grid, V = radial_grid()
    V = V.copy()
    V[:, 20:] = SENTINEL
    segs = contour_paths(grid, V, [0.5])[0.5]
    assert segs and np.max(np.vstack(segs)[:, 1]) <= grid.axes[1][20] + 1e-12


def test_contours_need_two_dimensions():
    with pytest.raises(ValueError):
        contour_paths(Grid((0.0,), (1.0,), (5,)), np.zeros(5), [0.5])


def test_trajectory_svg_is_deterministic(tmp_path):
    t = np.linspace(0.0, 1.0, 21)
    traj = Trajectory(t, np.column_stack([t, t**2]), np.zeros((20, 1)))
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    export_plot(str(a), traj, target=(1.0, 1.0))
    export_plot(str(b), traj, target=(1.0, 1.0))
    assert a.read_bytes() == b.read_bytes()
    assert ET.parse(a).getroot().tag.endswith("svg")


def test_scalar_trajectory_plots_against_time(tmp_path):
    t = np.linspace(0.0, 1.0, 11)
    export_plot(str(tmp_path / "s.svg"), Trajectory(t, t[:, None], np.zeros((10, 1))))
    assert (tmp_path / "s.svg").stat().st_size > 0


def test_nothing_to_plot():
    with pytest.raises(ValueError):
        export_plot("unused.svg")


def test_zermelo_contour_family(zermelo_levelset_run, tmp_path):
    res = zermelo_levelset_run.result
    table = res.min_time
    levels = np.arange(0.5, 5.0, 0.5)
    paths = contour_paths(table.grid, table.slices[0], levels)
    assert all(paths[c] for c in levels)
    export_plot(str(tmp_path / "z.svg"), grid=table.grid, values=table.slices[0], levels=levels,
                target=(20.0, 1.0))
    ET.parse(tmp_path / "z.svg")

"""
Tests of the image export.
"""

import numpy as np
import pytest

from lanediff.lane_graph import Polyline
from lanediff.lane_graph import SegmentGraph
from lanediff.lpim import BevGrid
from lanediff.render import GT_COLOR
from lanediff.render import overlay
from lanediff.render import read_image
from lanediff.render import render
from lanediff.render import to_gray
from lanediff.render import write_image
from lanediff.scene import rasterize


def moved(g, dx):
    return SegmentGraph([Polyline(s.points + [dx, 0.0]) for s in g.segments], g.adjacency)


def test_to_gray_flips_rows_and_clamps():
    grid = np.array([[1.0, 2.0, -1.0], [0.0, 0.5, 0.0]])
    image = to_gray(grid)
    assert image.dtype == np.uint8
    np.testing.assert_array_equal(image, [[0, 128, 0], [255, 255, 0]])
    assert not to_gray(np.full((2, 2), 3.0), normalize=True).any()
    np.testing.assert_array_equal(to_gray(np.array([[2.0, 4.0]]), normalize=True), [[0, 255]])
    with pytest.raises(ValueError, match="2-D grid"):
        to_gray(np.zeros((1, 2, 2)))


def test_overlay_pixel_counts(straight_lane):
    cells = int((rasterize(straight_lane).grid > 0).sum())
    image = overlay(straight_lane)
    assert image.shape == (64, 32, 3)
    assert int(image.any(axis=-1).sum()) == cells
    assert np.all(image[image.any(axis=-1)] == GT_COLOR)


def test_overlay_colors(straight_lane):
    same = overlay(straight_lane, straight_lane)
    lit = same.any(axis=-1)
    assert np.all(same[lit] == (255, 255, 0))

    apart = overlay(straight_lane, moved(straight_lane, 5.0))
    colors = {tuple(c) for c in apart.reshape(-1, 3).tolist()}
    assert colors == {(0, 0, 0), (0, 255, 0), (255, 0, 0)}


def test_ppm_round_trip(tmp_path, straight_lane):
    image = overlay(straight_lane, moved(straight_lane, 5.0))
    path = write_image(image, str(tmp_path / "overlay.ppm"))
    assert (tmp_path / "overlay.ppm").read_bytes().startswith(b"P6\n32 64\n255\n")
    np.testing.assert_array_equal(read_image(path), image)


def test_png_round_trip_and_stable_bytes(tmp_path, straight_lane):
    image = overlay(straight_lane, moved(straight_lane, 5.0))
    first = write_image(image, str(tmp_path / "a.png"))
    second = write_image(image, str(tmp_path / "b.png"))
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    np.testing.assert_array_equal(read_image(first), image)
    np.testing.assert_array_equal(read_image(second), image)


def test_render_artifacts(tmp_path, straight_lane, rng):
    raster = rasterize(straight_lane)
    gray = read_image(render(raster, str(tmp_path / "raster.ppm")))
    np.testing.assert_array_equal(gray[..., 0], to_gray(raster.grid))

    features = BevGrid(rng.standard_normal((2, 4, 3)))
    channel = read_image(render(features, str(tmp_path / "feat.ppm"), channel=1))
    assert channel.shape == (4, 3, 3)
    assert channel.min() == 0 and channel.max() == 255
    with pytest.raises(ValueError, match="Channel 2"):
        render(features, str(tmp_path / "feat.ppm"), channel=2)

    pair = read_image(render((straight_lane, straight_lane), str(tmp_path / "pair.ppm")))
    np.testing.assert_array_equal(pair, overlay(straight_lane, straight_lane))


def test_render_errors(tmp_path, straight_lane):
    with pytest.raises(ValueError, match="Unsupported image format"):
        render(straight_lane, str(tmp_path / "graph.jpg"))
    with pytest.raises(ValueError, match="Cannot render"):
        render(np.zeros((2, 2)), str(tmp_path / "x.png"))
    with pytest.raises(FileNotFoundError):
        read_image(str(tmp_path / "missing.ppm"))
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(ValueError, match="binary 8-bit PPM"):
        read_image(str(tmp_path / "bad.ppm"))

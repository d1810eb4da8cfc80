"""
Tests of the centerline graph data model: polylines, resampling, point-graph
conversion, junctions, validation, densification and the JSON interchange.
"""

import numpy as np
import pytest

from lanediff.lane_graph import PointGraph
from lanediff.lane_graph import Point2
from lanediff.lane_graph import Polyline
from lanediff.lane_graph import SegmentGraph
from lanediff.lane_graph import densify
from lanediff.lane_graph import junction_points
from lanediff.lane_graph import resample_polyline
from lanediff.lane_graph import to_point_graph
from lanediff.lane_graph import validate


def line(x0, y0, x1, y1, n):
    return Polyline(np.column_stack([np.linspace(x0, x1, n), np.linspace(y0, y1, n)]))


def test_polyline_rejects_short_and_degenerate_input():
    with pytest.raises(ValueError, match="at least 2 points"):
        Polyline([(0.0, 0.0)])
    with pytest.raises(ValueError, match="coincide"):
        Polyline([(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])
    with pytest.raises(ValueError, match="finite"):
        Polyline([(0.0, 0.0), (np.nan, 1.0)])


def test_polyline_lengths():
    p = Polyline([(0.0, 0.0), (0.0, 10.0), (10.0, 10.0)])
    np.testing.assert_allclose(p.cumulative_length, [0.0, 10.0, 20.0])
    assert p.arc_length == pytest.approx(20.0)
    assert p.start == Point2(0.0, 0.0)
    assert p.end == Point2(10.0, 10.0)


def test_resample_straight_segment():
    p = resample_polyline(Polyline([(0.0, 0.0), (19.0, 0.0)]), 20)
    np.testing.assert_allclose(p.points[:, 0], np.arange(20.0), atol=1e-12)
    np.testing.assert_allclose(p.points[:, 1], 0.0)


def test_resample_two_points_keeps_endpoints_exactly():
    src = Polyline([(0.3, -1.7), (2.0, 4.0), (5.1, 4.4)])
    p = resample_polyline(src, 2)
    assert np.array_equal(p.points, src.points[[0, -1]])


def test_resample_l_shape():
    p = resample_polyline(Polyline([(0.0, 0.0), (0.0, 10.0), (10.0, 10.0)]), 5)
    expected = [(0.0, 0.0), (0.0, 5.0), (0.0, 10.0), (5.0, 10.0), (10.0, 10.0)]
    np.testing.assert_allclose(p.points, expected, atol=1e-12)


def test_resample_preserves_arc_length_on_uniform_input():
    src = line(0.0, 0.0, 3.0, 40.0, 21)
    p = resample_polyline(src, len(src))
    assert p.arc_length == pytest.approx(src.arc_length, rel=1e-9)


def test_resample_rejects_too_few_points():
    with pytest.raises(ValueError, match="at least 2"):
        resample_polyline(line(0, 0, 1, 1, 2), 1)


def test_point_graph_of_empty_graph():
    pg = to_point_graph(SegmentGraph())
    assert len(pg) == 0
    assert len(pg.edges) == 0


def test_point_graph_of_single_segment():
    pg = to_point_graph(SegmentGraph([line(0, 0, 0, 19, 20)]))
    assert len(pg) == 20
    assert len(pg.edges) == 19


def test_point_graph_merges_coincident_junction():
    g = SegmentGraph.from_pairs([line(0, 0, 0, 19, 20), line(0, 19, 0, 38, 20)], [(0, 1)])
    pg = to_point_graph(g)
    # the shared junction is one vertex and the adjacency adds no self-loop
    assert len(pg) == 39
    assert len(pg.edges) == 38


def test_point_graph_links_unmerged_adjacency():
    g = SegmentGraph.from_pairs([line(0, 0, 0, 19, 20), line(0, 19.5, 0, 38.5, 20)], [(0, 1)])
    pg = to_point_graph(g)
    assert len(pg) == 40
    assert len(pg.edges) == 39
    assert [19, 20] in pg.edges.tolist()


def test_point_graph_is_deterministic(y_split):
    a, b = to_point_graph(y_split), to_point_graph(y_split)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.edges, b.edges)


def test_point_graph_rejects_self_loops():
    with pytest.raises(ValueError, match="self-loops"):
        PointGraph([(0.0, 0.0), (1.0, 0.0)], [(0, 0)])


def test_junction_points_of_path_and_split(y_split):
    assert junction_points(to_point_graph(SegmentGraph([line(0, 0, 0, 10, 6)]))) == []
    assert junction_points(to_point_graph(y_split)) == [Point2(0.0, 0.0)]


def test_junction_points_two_splits_one_merge():
    segments, pairs = [], []
    for x in (-10.0, 0.0):
        k = len(segments)
        segments += [line(x, -10, x, 0, 6), line(x, 0, x - 2, 10, 6), line(x, 0, x + 2, 10, 6)]
        pairs += [(k, k + 1), (k, k + 2)]
    k = len(segments)
    segments += [line(8, -10, 10, 0, 6), line(12, -10, 10, 0, 6), line(10, 0, 10, 10, 6)]
    pairs += [(k, k + 2), (k + 1, k + 2)]
    found = junction_points(to_point_graph(SegmentGraph.from_pairs(segments, pairs)))
    assert sorted(found) == [Point2(-10.0, 0.0), Point2(0.0, 0.0), Point2(10.0, 0.0)]


def test_validate_well_formed_graph(y_split):
    assert validate(y_split) == []
    assert validate(y_split, window=((-15, 15), (-30, 30))) == []


def test_validate_diagonal():
    g = SegmentGraph([line(0, 0, 0, 10, 3)], [[True]])
    violations = validate(g)
    assert [v.kind for v in violations] == ["diagonal"]
    assert violations[0].indices == (0,)


def test_validate_joinability():
    g = SegmentGraph.from_pairs([line(0, 0, 0, 10, 3), line(0, 12, 0, 20, 3)], [(0, 1)])
    violations = validate(g)
    assert [v.kind for v in violations] == ["joinability"]
    assert violations[0].indices == (0, 1)


def test_validate_overlap_and_window():
    g = SegmentGraph([line(0, 0, 0, 10, 3), line(0, 0, 0, 10, 3), line(0, 0, 20, 0, 3)])
    kinds = [v.kind for v in validate(g, window=((-15, 15), (-30, 30)))]
    assert kinds == ["overlap", "window"]


def test_from_pairs_rejects_missing_segment():
    with pytest.raises(ValueError, match="missing segment"):
        SegmentGraph.from_pairs([line(0, 0, 0, 1, 2)], [(0, 1)])


def test_json_interchange(tmp_path, y_split):
    path = tmp_path / "graph.json"
    y_split.save(path)
    loaded = SegmentGraph.load(path)
    assert loaded.edges() == [(0, 1), (0, 2)]
    for a, b in zip(loaded.segments, y_split.segments, strict=True):
        np.testing.assert_array_equal(a.points, b.points)
    with pytest.raises(FileNotFoundError):
        SegmentGraph.load(tmp_path / "missing.json")


def test_densify_subdivides_long_edges():
    pg = PointGraph([(0.0, 0.0), (0.0, 2.0), (0.0, 2.4)], [(0, 1), (1, 2)])
    dense = densify(pg, 0.5)
    assert len(dense) == 6
    np.testing.assert_array_equal(dense.vertices[:3], pg.vertices)
    assert dense.edge_lengths().max() <= 0.5 + 1e-12
    assert len(dense.edges) == 5
    with pytest.raises(ValueError, match="positive"):
        densify(pg, 0.0)

"""
Centerline graphs at segment and point granularity.

A :class:`SegmentGraph` holds ordered polylines (the vertex set) and a directed
boolean adjacency matrix, an edge ``i -> j`` meaning the end of segment ``i``
continues into the start of segment ``j``. A :class:`PointGraph` holds every
polyline point as a vertex and the point-to-point connectivity.
"""

import json
import logging
import os
from dataclasses import dataclass
from dataclasses import field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

EPS_JOIN = 0.1
"""Endpoint coincidence tolerance in meters for segment junctions."""


class Point2(NamedTuple):
    """A BEV point, ``x`` lateral and ``y`` longitudinal, in meters."""

    x: float
    y: float


class Violation(NamedTuple):
    """One broken :class:`SegmentGraph` invariant."""

    kind: str
    indices: tuple
    message: str


@dataclass(frozen=True, eq=False)
class Polyline:
    r"""
    An ordered open curve of at least two points.

    Parameters
    ----------
    points : array_like
        Point coordinates of shape ``(n, 2)`` in meters.

    Raises
    ------
    ValueError
        If fewer than two points are given, a coordinate is not finite,
        two consecutive points coincide or the arc length is zero.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"Polyline points must have shape (n, 2), got {pts.shape}.")
        if len(pts) < 2:
            raise ValueError(f"A polyline needs at least 2 points, got {len(pts)}.")
        if not np.all(np.isfinite(pts)):
            raise ValueError("Polyline points must be finite.")
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(steps <= 0.0):
            raise ValueError(f"Consecutive polyline points coincide at index {int(np.argmin(steps))}.")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def start(self):
        return Point2(*self.points[0])

    @property
    def end(self):
        return Point2(*self.points[-1])

    @property
    def cumulative_length(self):
        """Arc length at every point, starting at 0."""
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def arc_length(self):
        return float(self.cumulative_length[-1])


def resample_polyline(p, n):
    r"""
    Resample a polyline to ``n`` points at equal arc-length spacing.

    Parameters
    ----------
    p : Polyline
        Source polyline.
    n : int
        Number of output points, at least 2.

    Returns
    -------
    Polyline
        Polyline whose first and last points equal those of ``p`` exactly.

    Raises
    ------
    ValueError
        If ``n < 2`` or ``p`` has zero length.
    """
    if n < 2:
        raise ValueError(f"Cannot resample to {n} points, need at least 2.")
    cum = p.cumulative_length
    total = cum[-1]
    if total <= 0.0:
        raise ValueError("Cannot resample a polyline of zero length.")
    targets = np.linspace(0.0, total, n)
    out = np.column_stack(
        [
            np.interp(targets, cum, p.points[:, 0]),
            np.interp(targets, cum, p.points[:, 1]),
        ]
    )
    out[0] = p.points[0]
    out[-1] = p.points[-1]
    return Polyline(out)


@dataclass(frozen=True, eq=False)
class SegmentGraph:
    r"""
    Segment-level centerline graph :math:`G = (V, E)`.

    Parameters
    ----------
    segments : sequence of Polyline
        Centerline segments.
    adjacency : array_like, optional
        Boolean matrix of shape ``(|V|, |V|)``; ``adjacency[i, j]`` marks the
        directed end-to-start connection from segment ``i`` to segment ``j``.
    ids : sequence of int, optional
        Per-segment identifiers, defaults to ``0 .. |V|-1``.
    """

    segments: tuple = ()
    adjacency: np.ndarray = None
    ids: tuple = field(default=None)

    def __post_init__(self):
        segments = tuple(s if isinstance(s, Polyline) else Polyline(s) for s in self.segments)
        n = len(segments)
        adjacency = np.zeros((n, n), dtype=bool) if self.adjacency is None else np.array(self.adjacency)
        if adjacency.shape != (n, n):
            raise ValueError(f"Adjacency shape {adjacency.shape} does not match {n} segments.")
        adjacency = adjacency.astype(bool)
        adjacency.setflags(write=False)
        ids = tuple(range(n)) if self.ids is None else tuple(int(i) for i in self.ids)
        if len(ids) != n:
            raise ValueError(f"Got {len(ids)} ids for {n} segments.")
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.segments)

    @classmethod
    def from_pairs(cls, segments, pairs, ids=None):
        """Build a graph from polylines and a sparse ``(i, j)`` edge list."""
        n = len(segments)
        adjacency = np.zeros((n, n), dtype=bool)
        for i, j in pairs:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"Adjacency pair ({i}, {j}) references a missing segment.")
            adjacency[i, j] = True
        return cls(tuple(segments), adjacency, ids)

    def edges(self):
        """Sorted list of directed segment edges."""
        return [(int(i), int(j)) for i, j in np.argwhere(self.adjacency)]

    def to_json(self):
        """Interchange document ``{"segments": [...], "adjacency": [[i, j], ...]}``."""
        return {
            "segments": [s.points.tolist() for s in self.segments],
            "adjacency": [list(e) for e in self.edges()],
        }

    @classmethod
    def from_json(cls, data):
        if "segments" not in data or "adjacency" not in data:
            raise ValueError("Graph document must contain 'segments' and 'adjacency'.")
        return cls.from_pairs([Polyline(s) for s in data["segments"]], data["adjacency"])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)
        logging.debug(f"Segment graph with {len(self)} segments written to {path}.")

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"File not found: {path}")
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True, eq=False)
class PointGraph:
    r"""
    Point-level centerline graph :math:`\ddot{G} = (\ddot{V}, \ddot{E})`.

    Parameters
    ----------
    vertices : array_like
        Vertex coordinates of shape ``(V, 2)``.
    edges : array_like
        Directed edges of shape ``(E, 2)`` as ``(from, to)`` vertex indices.
    """

    vertices: np.ndarray = None
    edges: np.ndarray = None

    def __post_init__(self):
        v = np.zeros((0, 2)) if self.vertices is None else np.array(self.vertices, dtype=float).reshape(-1, 2)
        e = np.zeros((0, 2), dtype=int) if self.edges is None else np.array(self.edges, dtype=int).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= len(v)):
            raise ValueError("Point graph edge references a missing vertex.")
        if len(e) and np.any(e[:, 0] == e[:, 1]):
            raise ValueError("Point graph must not contain self-loops.")
        v.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "edges", e)

    def __len__(self):
        return len(self.vertices)

    def edge_lengths(self):
        if not len(self.edges):
            return np.zeros(0)
        return np.linalg.norm(self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]], axis=1)

    def out_degree(self):
        return np.bincount(self.edges[:, 0], minlength=len(self)) if len(self.edges) else np.zeros(len(self), int)

    def in_degree(self):
        return np.bincount(self.edges[:, 1], minlength=len(self)) if len(self.edges) else np.zeros(len(self), int)


def to_point_graph(g, eps=EPS_JOIN):
    r"""
    Convert a segment graph to its point-level graph.

    Every polyline contributes a directed path over its consecutive points.
    Points closer than ``eps`` are merged into one vertex, the first occurring
    point keeps its place in the vertex order. An adjacency whose junction
    points were not merged adds one explicit edge from the last point of the
    source segment to the first point of the target segment.

    Parameters
    ----------
    g : SegmentGraph
        Source graph.
    eps : float
        Merge radius in meters.

    Returns
    -------
    PointGraph
    """
    if not len(g):
        return PointGraph()

    points = np.concatenate([s.points for s in g.segments])
    offsets = np.cumsum([0] + [len(s) for s in g.segments])

    # union of near points, lowest index wins
    tree = cKDTree(points)
    owner = np.arange(len(points))
    for a, b in sorted(tree.query_pairs(eps, output_type="set")):
        ra, rb = owner[a], owner[b]
        if ra != rb:
            keep, drop = min(ra, rb), max(ra, rb)
            owner[owner == drop] = keep

    roots, vertex_of = np.unique(owner, return_inverse=True)
    vertices = points[roots]

    edges = []
    seen = set()

    def add(u, v):
        if u != v and (u, v) not in seen:
            seen.add((u, v))
            edges.append((u, v))

    for k, s in enumerate(g.segments):
        ids = vertex_of[offsets[k] : offsets[k] + len(s)]
        for u, v in zip(ids[:-1], ids[1:], strict=True):
            add(int(u), int(v))
    for i, j in g.edges():
        add(int(vertex_of[offsets[i + 1] - 1]), int(vertex_of[offsets[j]]))

    return PointGraph(vertices, edges)


def junction_points(g):
    """
    Vertices where lanes split (out-degree > 1) or merge (in-degree > 1).

    Parameters
    ----------
    g : PointGraph

    Returns
    -------
    list of Point2
        Junction vertices in vertex order.
    """
    mask = (g.out_degree() > 1) | (g.in_degree() > 1)
    return [Point2(*g.vertices[i]) for i in np.flatnonzero(mask)]


def validate(g, window=None, eps=EPS_JOIN):
    """
    Check the :class:`SegmentGraph` invariants.

    Parameters
    ----------
    g : SegmentGraph
        Graph to check.
    window : tuple, optional
        ``((x_min, x_max), (y_min, y_max))``; when given, every point must lie
        inside it.
    eps : float
        Junction tolerance in meters.

    Returns
    -------
    list of Violation
        Empty if and only if the graph is well formed.
    """
    violations = []
    adjacency = np.asarray(g.adjacency)
    n = len(g)

    for i in np.flatnonzero(np.diag(adjacency)):
        violations.append(Violation("diagonal", (int(i),), f"Segment {i} is adjacent to itself."))

    for i, j in g.edges():
        if i == j:
            continue
        gap = float(np.linalg.norm(g.segments[i].points[-1] - g.segments[j].points[0]))
        if gap > eps:
            violations.append(
                Violation(
                    "joinability",
                    (i, j),
                    f"Segment {i} ends {gap:.3f} m away from the start of segment {j} (tolerance {eps} m).",
                )
            )

    for i in range(n):
        for j in range(i + 1, n):
            a, b = g.segments[i].points, g.segments[j].points
            if a.shape == b.shape and np.all(np.linalg.norm(a - b, axis=1) <= eps):
                violations.append(Violation("overlap", (i, j), f"Segments {i} and {j} overlap."))

    if window is not None:
        (x0, x1), (y0, y1) = window
        for i, s in enumerate(g.segments):
            p = s.points
            if np.any((p[:, 0] < x0) | (p[:, 0] > x1) | (p[:, 1] < y0) | (p[:, 1] > y1)):
                violations.append(Violation("window", (i,), f"Segment {i} leaves the perception window."))

    return violations


def densify(g, spacing=0.5):
    """
    Subdivide point-graph edges so that no edge is longer than ``spacing``.

    Parameters
    ----------
    g : PointGraph
        Source graph.
    spacing : float
        Maximum edge length in meters.

    Returns
    -------
    PointGraph
        Graph that keeps all original vertices (same indices) and appends the
        inserted ones.
    """
    if spacing <= 0:
        raise ValueError(f"Densification spacing must be positive, got {spacing}.")
    vertices = [g.vertices]
    edges = []
    next_id = len(g)
    for (u, v), length in zip(g.edges, g.edge_lengths(), strict=True):
        pieces = int(np.ceil(length / spacing - 1e-9))
        if pieces <= 1:
            edges.append((u, v))
            continue
        frac = np.arange(1, pieces)[:, None] / pieces
        inner = g.vertices[u] + frac * (g.vertices[v] - g.vertices[u])
        vertices.append(inner)
        chain = [u, *range(next_id, next_id + len(inner)), v]
        edges.extend(zip(chain[:-1], chain[1:], strict=True))
        next_id += len(inner)
    return PointGraph(np.concatenate(vertices), edges)

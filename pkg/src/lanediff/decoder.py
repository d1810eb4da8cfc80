"""
Set-prediction lane decoder.

``K`` learned queries cross-attend to the flattened feature grid. Dense
heads turn every query into a polyline of ``N`` points, an existence score
and a pair feature for the adjacency logits. Training matches predictions to
ground-truth segments one-to-one with the Hungarian algorithm.
"""

import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .functions import bce_with_logits
from .functions import focal_loss
from .functions import sigmoid
from .lane_graph import EPS_JOIN
from .lane_graph import Polyline
from .lane_graph import SegmentGraph
from .lane_graph import resample_polyline
from .lane_graph import validate
from .nn import GELU
from .nn import Attention
from .nn import Dense
from .nn import Layer
from .nn import Residual
from .nn import Sequential
from .nn import accumulate
from .nn import grid_embed
from .nn import layer_registry
from .scene import WINDOW

LOSS_WEIGHTS = (2.0, 5.0, 1.0)
"""Weights of the classification, polyline and topology losses."""

MATCH_WEIGHTS = (5.0, 2.0)
"""Weights of the mean point distance and the score in the matching cost."""


@dataclass(frozen=True, eq=False)
class LanePrediction:
    """
    Decoder output for one scene.

    Parameters
    ----------
    polylines : numpy.ndarray
        Candidate points of shape ``(K, N, 2)`` in meters.
    scores : numpy.ndarray
        Existence probabilities of shape ``(K,)``.
    adjacency_logits : numpy.ndarray
        Pairwise logits of shape ``(K, K)``; entry ``(a, b)`` scores the
        connection from the end of ``a`` to the start of ``b``.
    """

    polylines: np.ndarray
    scores: np.ndarray
    adjacency_logits: np.ndarray

    @property
    def K(self):
        return len(self.scores)


class MatchResult(NamedTuple):
    """One-to-one assignment of predictions to ground truth."""

    assignment: list
    cost: float


@layer_registry
class LaneDecoder(Layer):
    r"""
    Query-based decoder from a ``(C, H, W)`` grid to a :class:`LanePrediction`.

    Parameters
    ----------
    name : str
        Parameter prefix.
    channels : int
        Input channels ``C``.
    shape : tuple of int
        Grid shape ``(H, W)``.
    window : tuple
        Perception window; predicted points are mapped into it by a sigmoid.
    queries : int
        Number of candidates ``K``.
    n_points : int
        Points per candidate ``N``.
    dim : int
        Query width ``D``.
    pos_dim : int
        Per-coordinate size of the cell position embedding.
    heads : int
        Attention heads.
    """

    def __init__(
        self, name="dec", channels=8, shape=(64, 32), window=WINDOW, queries=12, n_points=20, dim=32, pos_dim=8, heads=1
    ):
        super().__init__(name)
        self.channels = channels
        self.shape = tuple(shape)
        self.window = window
        self.queries = queries
        self.n_points = n_points
        self.dim = dim
        self.pos = grid_embed(window, shape, pos_dim)
        (x0, x1), (y0, y1) = window
        self.lo = np.tile([x0, y0], n_points)
        self.span = np.tile([x1 - x0, y1 - y0], n_points)

        self.memory = Dense(f"{name}.memory", channels + 2 * pos_dim, dim)
        self.cross = Attention(f"{name}.cross", dim, heads=heads)
        self.ff = Residual(
            f"{name}.ff",
            Sequential(
                f"{name}.ff", [Dense(f"{name}.ff.0", dim, 2 * dim), GELU(), Dense(f"{name}.ff.1", 2 * dim, dim)]
            ),
        )
        self.point_head = Dense(f"{name}.points", dim, 2 * n_points)
        self.score_head = Dense(f"{name}.score", dim, 1)
        self.adj_a = Dense(f"{name}.adj_a", dim, dim)
        self.adj_b = Dense(f"{name}.adj_b", dim, dim)
        self.parts = (self.memory, self.cross, self.ff, self.point_head, self.score_head, self.adj_a, self.adj_b)

    def param_shapes(self):
        shapes = super().param_shapes()
        shapes[self.key("queries")] = (self.queries, self.dim)
        return shapes

    def init_params(self, rng):
        params = super().init_params(rng)
        params[self.key("queries")] = rng.uniform(-1.0, 1.0, size=(self.queries, self.dim))
        return params

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.channels, *self.shape):
            expected = (self.channels, *self.shape)
            raise ValueError(f"{self} expects a grid of shape {expected}, got {tuple(input_shape)}.")
        return (self.queries, self.n_points, 2)

    def forward(self, params, bev):
        bev = np.asarray(getattr(bev, "features", bev), dtype=float)
        self.output_shape(bev.shape)
        c = self.channels
        mem, c_mem = self.memory.forward(params, np.concatenate([bev.reshape(c, -1).T, self.pos], axis=1))
        q = self.p(params, "queries")
        a, c_cross = self.cross.attend(params, q, mem)
        h, c_ff = self.ff.forward(params, q + a)

        raw_pts, c_pts = self.point_head.forward(params, h)
        s = sigmoid(raw_pts)
        polylines = (self.lo + s * self.span).reshape(self.queries, self.n_points, 2)
        raw_score, c_score = self.score_head.forward(params, h)
        scores = sigmoid(raw_score[:, 0])
        fa, c_a = self.adj_a.forward(params, h)
        fb, c_b = self.adj_b.forward(params, h)
        logits = fa @ fb.T / np.sqrt(self.dim)

        pred = LanePrediction(polylines, scores, logits)
        return pred, (c_mem, c_cross, c_ff, c_pts, s, c_score, scores, c_a, c_b, fa, fb)

    def backward(self, params, cache, dpred):
        """
        Gradients from ``dpred = (dpolylines, dscores, dlogits)``.

        Returns
        -------
        tuple
            ``(dbev, grads)``.
        """
        dpoly, dscores, dlogits = dpred
        c_mem, c_cross, c_ff, c_pts, s, c_score, scores, c_a, c_b, fa, fb = cache
        grads = {}
        scale = 1.0 / np.sqrt(self.dim)

        draw_pts = dpoly.reshape(self.queries, -1) * self.span * s * (1.0 - s)
        dh, g = self.point_head.backward(params, c_pts, draw_pts)
        accumulate(grads, g)
        draw_score = (dscores * scores * (1.0 - scores))[:, None]
        dh_s, g = self.score_head.backward(params, c_score, draw_score)
        accumulate(grads, g)
        dh_a, g = self.adj_a.backward(params, c_a, dlogits @ fb * scale)
        accumulate(grads, g)
        dh_b, g = self.adj_b.backward(params, c_b, dlogits.T @ fa * scale)
        accumulate(grads, g)

        dh1, g = self.ff.backward(params, c_ff, dh + dh_s + dh_a + dh_b)
        accumulate(grads, g)
        dq, dmem, g = self.cross.attend_backward(params, c_cross, dh1)
        accumulate(grads, g)
        accumulate(grads, {self.key("queries"): dh1 + dq})
        dmem_in, g = self.memory.backward(params, c_mem, dmem)
        accumulate(grads, g)
        c, (h, w) = self.channels, self.shape
        return dmem_in[:, :c].T.reshape(c, h, w), grads


def decode(bev, params, decoder):
    """Candidate polylines, scores and adjacency logits of a feature grid."""
    return decoder.forward(params, bev)[0]


def hungarian_match(cost):
    """
    Minimum-cost one-to-one assignment of ``min(K, G)`` pairs.

    Parameters
    ----------
    cost : array_like
        Finite cost matrix of shape ``(K, G)``.

    Returns
    -------
    MatchResult
        Pairs ``(prediction, ground truth)`` sorted by prediction index.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return MatchResult([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("Matching costs must be finite.")
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols, strict=True)]
    return MatchResult(pairs, float(sum(cost[r, c] for r, c in pairs)))


def gt_points(gt, n_points):
    """Ground-truth segments resampled to ``n_points``, shape ``(G, N, 2)``."""
    if not len(gt):
        return np.zeros((0, n_points, 2))
    return np.stack([resample_polyline(s, n_points).points for s in gt.segments])


def point_distance(polylines, targets):
    """Mean per-point L1 distance between every candidate and every target, shape ``(K, G)``."""
    return np.abs(polylines[:, None] - targets[None]).sum(axis=-1).mean(axis=-1)


def match_cost(pred, targets):
    return MATCH_WEIGHTS[0] * point_distance(pred.polylines, targets) - MATCH_WEIGHTS[1] * pred.scores[:, None]


def lane_loss(pred, gt, weights=LOSS_WEIGHTS, with_grad=False, focal_gamma=2.0, focal_alpha=0.25):
    r"""
    Classification, polyline and topology losses of one prediction.

    .. math::

        \mathcal{L} = \lambda_1 \mathcal{L}_\mathrm{cls} + \lambda_2 \mathcal{L}_\mathrm{poly}
        + \lambda_3 \mathcal{L}_\mathrm{topo}

    ``L_cls`` is the binary focal loss of all ``K`` scores against the match
    indicator (mean over ``K``), ``L_poly`` the mean over matched pairs of
    the mean per-point L1 distance and ``L_topo`` the binary cross-entropy of
    the adjacency logits of ordered matched pairs against the ground-truth
    adjacency (mean over pairs).

    Parameters
    ----------
    pred : LanePrediction
    gt : SegmentGraph
    weights : tuple of float
        :math:`(\lambda_1, \lambda_2, \lambda_3)`.
    with_grad : bool
        Also return ``(dpolylines, dscores, dlogits)``.

    Returns
    -------
    tuple
        ``(total, components)`` or ``(total, components, dpred)``;
        ``components`` holds ``cls``, ``poly``, ``topo`` and the match.
    """
    k, n = pred.polylines.shape[:2]
    targets = gt_points(gt, n)
    match = hungarian_match(match_cost(pred, targets)) if len(targets) else MatchResult([], 0.0)
    pairs = match.assignment

    dpoly = np.zeros_like(pred.polylines)
    dlogits = np.zeros_like(pred.adjacency_logits)

    labels = np.zeros(k)
    for a, _ in pairs:
        labels[a] = 1.0
    cls_el, cls_grad = focal_loss(pred.scores, labels, focal_gamma, focal_alpha)
    l_cls = float(cls_el.mean())
    dscores = cls_grad / k

    l_poly = 0.0
    if pairs:
        for a, g in pairs:
            diff = pred.polylines[a] - targets[g]
            l_poly += np.abs(diff).sum(axis=-1).mean()
            dpoly[a] = np.sign(diff) / (n * len(pairs))
        l_poly /= len(pairs)

    l_topo = 0.0
    ordered = [(pa, pb) for pa in pairs for pb in pairs if pa[0] != pb[0]]
    if ordered:
        adjacency = np.asarray(gt.adjacency)
        for (a, ga), (b, gb) in ordered:
            loss, grad = bce_with_logits(pred.adjacency_logits[a, b], float(adjacency[ga, gb]))
            l_topo += float(loss)
            dlogits[a, b] = grad / len(ordered)
        l_topo /= len(ordered)

    w_cls, w_poly, w_topo = weights
    total = w_cls * l_cls + w_poly * l_poly + w_topo * l_topo
    components = {"cls": l_cls, "poly": float(l_poly), "topo": l_topo, "match": match}
    if not with_grad:
        return total, components
    return total, components, (w_poly * dpoly, w_cls * dscores, w_topo * dlogits)


def _dedupe_points(points):
    keep = np.concatenate([[True], np.linalg.norm(np.diff(points, axis=0), axis=1) > 1e-9])
    return points[keep]


def to_segment_graph(pred, score_threshold=0.5, adjacency_threshold=0.5, eps=EPS_JOIN):
    """
    Threshold a prediction into a valid :class:`SegmentGraph`.

    Candidates with ``score >= score_threshold`` are kept, a candidate that
    overlaps a higher-scoring kept one is dropped. Edges between kept
    candidates with ``sigmoid(logit) >= adjacency_threshold`` are added and
    the joined end and start points are snapped to their common mean so the
    junction tolerance holds.

    Returns
    -------
    SegmentGraph
        Kept segments ordered by descending score; ``ids`` hold the
        candidate indices.
    """
    if not (0 < score_threshold < 1 and 0 < adjacency_threshold < 1):
        raise ValueError("Thresholds must lie in (0, 1).")
    order = [int(i) for i in np.argsort(-pred.scores, kind="stable") if pred.scores[i] >= score_threshold]
    kept = []
    for i in order:
        pts = pred.polylines[i]
        if any(np.all(np.linalg.norm(pts - pred.polylines[j], axis=1) <= eps) for j in kept):
            continue
        kept.append(i)
    points = {i: np.array(pred.polylines[i], dtype=float) for i in kept}

    probs = sigmoid(pred.adjacency_logits)
    edges = [(a, b) for a in kept for b in kept if a != b and probs[a, b] >= adjacency_threshold]

    # snap joined ports: ("end", a) and ("start", b) share one position
    parent = {}

    def find(port):
        parent.setdefault(port, port)
        while parent[port] != port:
            parent[port] = parent[parent[port]]
            port = parent[port]
        return port

    for a, b in edges:
        ra, rb = find(("end", a)), find(("start", b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    clusters = {}
    for port in list(parent):
        clusters.setdefault(find(port), []).append(port)
    for members in clusters.values():
        idx = {"start": 0, "end": -1}
        centre = np.mean([points[i][idx[side]] for side, i in members], axis=0)
        for side, i in members:
            points[i][idx[side]] = centre

    segments, ids = [], []
    for i in kept:
        pts = _dedupe_points(points[i])
        if len(pts) >= 2:
            segments.append(Polyline(pts))
            ids.append(i)
    position = {i: k for k, i in enumerate(ids)}
    pairs = [(position[a], position[b]) for a, b in edges if a in position and b in position]
    graph = SegmentGraph.from_pairs(segments, pairs, ids)
    violations = validate(graph, eps=eps)
    if violations:
        logging.warning(f"Thresholded prediction has {len(violations)} violations: {violations[0].message}")
    return graph


def save_prediction(pred, path, scores_path, score_threshold=0.5, adjacency_threshold=0.5):
    """Write the thresholded graph as interchange JSON and the kept scores alongside."""
    graph = to_segment_graph(pred, score_threshold, adjacency_threshold)
    graph.save(path)
    with open(scores_path, "w") as f:
        json.dump({"ids": list(graph.ids), "scores": [float(pred.scores[i]) for i in graph.ids]}, f)
    return graph

"""
Point-level centerline-graph metrics.

All graph metrics operate on :class:`~lanediff.lane_graph.PointGraph`
instances densified to at most 0.5 m point spacing. Reachability follows
the directed edges (driving direction). Every metric lies in [0, 1] and
equals 1 when a graph is compared with itself.
"""

import json
import logging
from dataclasses import dataclass

import networkx as nx
import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from tabulate import tabulate

from .lane_graph import densify
from .lane_graph import junction_points
from .lane_graph import to_point_graph
from .scene import WINDOW
from .scene import rasterize

METRICS = ("geo_f1", "topo_f1", "jtopo_f1", "apls", "sda", "iou")


@dataclass(frozen=True)
class MetricConfig:
    """
    Parameters of the evaluation protocol.

    Parameters
    ----------
    radius : float
        Point matching radius ``r`` in meters.
    reach_len : float
        Reachable-set path length in meters.
    junction_radius : float
        Junction matching radius ``r_j`` in meters.
    iou_resolution : float
        Raster resolution of the IoU metric in meters per cell.
    pair_samples : int
        Number of sampled path pairs of APLS.
    spacing : float
        Densification spacing in meters.
    score_threshold, adjacency_threshold : float
        Thresholds turning predictions into graphs.
    """

    radius: float = 0.5
    reach_len: float = 15.0
    junction_radius: float = 1.0
    iou_resolution: float = 0.3
    pair_samples: int = 200
    spacing: float = 0.5
    score_threshold: float = 0.5
    adjacency_threshold: float = 0.5

    def __post_init__(self):
        for name in ("radius", "reach_len", "junction_radius", "iou_resolution", "spacing"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Metric parameter '{name}' must be positive, got {getattr(self, name)}.")
        if self.pair_samples < 1:
            raise ValueError(f"pair_samples must be at least 1, got {self.pair_samples}.")


def _points(x):
    if hasattr(x, "vertices"):
        return np.asarray(x.vertices, dtype=float).reshape(-1, 2)
    return np.asarray(x, dtype=float).reshape(-1, 2)


def greedy_match(pred, gt, r):
    """
    One-to-one matching of points within ``r``, closest pairs first.

    Ties in distance are broken by the lower prediction index, then the
    lower ground-truth index.

    Parameters
    ----------
    pred, gt : PointGraph or array_like
        Point sets of shape ``(n, 2)``.
    r : float
        Matching radius.

    Returns
    -------
    list of tuple
        Matched ``(pred_index, gt_index)`` pairs.
    """
    p, g = _points(pred), _points(gt)
    if not len(p) or not len(g):
        return []
    near = cKDTree(p).query_ball_tree(cKDTree(g), r)
    candidates = sorted(
        (float(np.linalg.norm(p[i] - g[j])), i, int(j)) for i, neighbours in enumerate(near) for j in neighbours
    )
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return pairs


def optimal_match_count(pred, gt, r):
    """Size of a maximum matching of points within ``r``."""
    p, g = _points(pred), _points(gt)
    if not len(p) or not len(g):
        return 0
    d = np.linalg.norm(p[:, None] - g[None], axis=-1)
    cost = (d > r).astype(float)
    rows, cols = linear_sum_assignment(cost)
    return int(np.sum(cost[rows, cols] == 0))


def _prf(matched, n_pred, n_gt):
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0, 0.0, 0.0
    precision, recall = matched / n_pred, matched / n_gt
    f1 = 0.0 if matched == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def _f1(pred, gt, r):
    p, g = _points(pred), _points(gt)
    return _prf(len(greedy_match(p, g, r)), len(p), len(g))[2]


def geo_f1(pred, gt, r=0.5, check_optimal=False):
    """
    Precision, recall and F1 of point matching within ``r``.

    Parameters
    ----------
    pred, gt : PointGraph
        Densified graphs.
    r : float
        Matching radius in meters.
    check_optimal : bool
        Compare the greedy match count with an optimal assignment and warn
        if they differ by more than 5 %.

    Returns
    -------
    tuple of float
        ``(precision, recall, f1)``; both graphs empty gives ``(1, 1, 1)``,
        exactly one empty gives ``(0, 0, 0)``.
    """
    matched = len(greedy_match(pred, gt, r))
    if check_optimal:
        best = optimal_match_count(pred, gt, r)
        if best and (best - matched) / best > 0.05:
            logging.warning(f"Greedy geo matching found {matched} pairs, optimal matching {best}.")
    return _prf(matched, len(pred), len(gt))


def _digraph(g):
    graph = nx.DiGraph()
    graph.add_nodes_from(range(len(g)))
    for (u, v), length in zip(g.edges, g.edge_lengths(), strict=True):
        graph.add_edge(int(u), int(v), weight=float(length))
    return graph


def _reach(graph, source, reach_len):
    lengths = nx.single_source_dijkstra_path_length(graph, source, cutoff=reach_len, weight="weight")
    return sorted(lengths)


def _reach_f1(pred, gt, pairs, r, reach_len):
    gp, gg = _digraph(pred), _digraph(gt)
    scores = []
    for i, j in pairs:
        rp = pred.vertices[_reach(gp, i, reach_len)]
        rg = gt.vertices[_reach(gg, j, reach_len)]
        scores.append(_f1(rp, rg, r))
    return float(np.mean(scores))


def topo_f1(pred, gt, r=0.5, reach_len=15.0, matches=None):
    """
    Mean F1 of the reachable point sets of all geo-matched pairs.

    For a matched pair the points reachable within ``reach_len`` meters
    along directed edges are collected on both graphs and compared with the
    same radius matching as :func:`geo_f1`.

    Returns
    -------
    float
        1 for two empty graphs, 0 when nothing matches.
    """
    if not len(pred) and not len(gt):
        return 1.0
    pairs = greedy_match(pred, gt, r) if matches is None else matches
    if not pairs:
        return 0.0
    return _reach_f1(pred, gt, pairs, r, reach_len)


def jtopo_f1(pred, gt, r=0.5, reach_len=15.0, matches=None):
    """
    :func:`topo_f1` seeded only at matched pairs near a ground-truth junction.

    Returns
    -------
    tuple
        ``(f1, n_seeds)``. Without any seed the score is 1 and ``n_seeds`` 0.
    """
    if not len(pred) and not len(gt):
        return 1.0, 0
    junctions = np.array(junction_points(gt)).reshape(-1, 2)
    if not len(junctions):
        logging.debug("No ground-truth junctions, junction topology reported as 1.")
        return 1.0, 0
    pairs = greedy_match(pred, gt, r) if matches is None else matches
    tree = cKDTree(junctions)
    seeds = [(i, j) for i, j in pairs if tree.query(gt.vertices[j], distance_upper_bound=r)[0] <= r]
    if not seeds:
        return 0.0, 0
    return _reach_f1(pred, gt, seeds, r, reach_len), len(seeds)


def apls(pred, gt, pair_samples=200, rng=None, r=0.5):
    r"""
    Average path length similarity.

    Source vertices of the ground truth are visited in random order; each
    contributes one random reachable target until ``pair_samples`` pairs are
    collected. Both ends are snapped to the nearest prediction vertex within
    ``r``; the pair penalty is

    .. math::

        \min\left(1, \frac{|L_\mathrm{gt} - L_\mathrm{pr}|}{L_\mathrm{gt}}\right)

    and 1 when a snap misses or the snapped vertices are not connected.

    Returns
    -------
    float
        ``1 - mean penalty``. Without connected ground-truth pairs the score
        is 1 if the prediction has none either, else 0.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    gg = _digraph(gt)
    pairs = []
    for source in rng.permutation(len(gt)):
        if len(pairs) >= pair_samples:
            break
        lengths = nx.single_source_dijkstra_path_length(gg, int(source), weight="weight")
        targets = sorted(t for t in lengths if t != source)
        if targets:
            target = targets[int(rng.integers(len(targets)))]
            pairs.append((int(source), target, lengths[target]))

    if not pairs:
        return 1.0 if not len(pred.edges) else 0.0
    if not len(pred):
        return 0.0

    gp = _digraph(pred)
    tree = cKDTree(pred.vertices)
    penalties = []
    for u, v, length_gt in pairs:
        du, su = tree.query(gt.vertices[u], distance_upper_bound=r)
        dv, sv = tree.query(gt.vertices[v], distance_upper_bound=r)
        if not (np.isfinite(du) and np.isfinite(dv)):
            penalties.append(1.0)
            continue
        try:
            length_pr = nx.shortest_path_length(gp, int(su), int(sv), weight="weight")
        except nx.NetworkXNoPath:
            penalties.append(1.0)
            continue
        penalties.append(min(1.0, abs(length_gt - length_pr) / length_gt))
    return 1.0 - float(np.mean(penalties))


def sda_scores(pred, gt, r_j=1.0):
    """Precision, recall and F1 of junction detection within ``r_j``."""
    jp = np.array(junction_points(pred)).reshape(-1, 2)
    jg = np.array(junction_points(gt)).reshape(-1, 2)
    return _prf(len(greedy_match(jp, jg, r_j)), len(jp), len(jg))


def sda(pred, gt, r_j=1.0):
    """F1 of split and merge point detection; 1 when neither graph has junctions."""
    return sda_scores(pred, gt, r_j)[2]


def iou(pred, gt, resolution=0.3, window=WINDOW):
    """
    Intersection over union of the rasterized segment graphs.

    Parameters
    ----------
    pred, gt : SegmentGraph
    resolution : float
        Cell size in meters.
    window : tuple
        Rasterized window.

    Returns
    -------
    float
        1 when both rasters are empty.
    """
    a = rasterize(pred, resolution, window).grid > 0
    b = rasterize(gt, resolution, window).grid > 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def evaluate_scene(pred, gt, cfg=None, rng=None, window=WINDOW):
    """
    All six metrics of one predicted segment graph against its ground truth.

    Returns
    -------
    dict
        Metric values plus ``jtopo_seeds``.
    """
    cfg = MetricConfig() if cfg is None else cfg
    rng = np.random.default_rng(0) if rng is None else rng
    pp = densify(to_point_graph(pred), cfg.spacing)
    pg = densify(to_point_graph(gt), cfg.spacing)
    matches = greedy_match(pp, pg, cfg.radius)
    geo = geo_f1(pp, pg, cfg.radius, check_optimal=max(len(pp), len(pg)) <= 50)
    jtopo, seeds = jtopo_f1(pp, pg, cfg.radius, cfg.reach_len, matches)
    return {
        "geo_f1": geo[2],
        "topo_f1": topo_f1(pp, pg, cfg.radius, cfg.reach_len, matches),
        "jtopo_f1": jtopo,
        "apls": apls(pp, pg, cfg.pair_samples, rng, cfg.radius),
        "sda": sda(pp, pg, cfg.junction_radius),
        "iou": iou(pred, gt, cfg.iou_resolution, window),
        "jtopo_seeds": seeds,
    }


class MetricReport:
    """
    Per-scene metric table and its unweighted mean.

    Parameters
    ----------
    per_scene : pandas.DataFrame
        One row per scene with the columns of :data:`METRICS`.
    meta : dict, optional
        Free-form context (stage, variant, ...) stored with the report.
    """

    def __init__(self, per_scene, meta=None):
        frame = pd.DataFrame(per_scene).reset_index(drop=True)
        missing = [m for m in METRICS if m not in frame.columns]
        if missing:
            raise ValueError(f"Metric report is missing columns {missing}.")
        values = frame[list(METRICS)].to_numpy(dtype=float)
        if values.size and (np.any(values < -1e-12) or np.any(values > 1 + 1e-12)):
            raise ValueError("Metric values must lie in [0, 1].")
        self.per_scene = frame
        self.meta = dict(meta or {})

    @classmethod
    def from_scenes(cls, rows, meta=None):
        return cls(pd.DataFrame(list(rows)), meta)

    @property
    def aggregate(self):
        if self.per_scene.empty:
            return {m: float("nan") for m in METRICS}
        return {m: float(self.per_scene[m].mean()) for m in METRICS}

    def to_dict(self):
        return {
            "meta": self.meta,
            "per_scene": [
                {k: v.item() if isinstance(v, np.generic) else v for k, v in row.items()}
                for row in self.per_scene.to_dict(orient="records")
            ],
            "aggregate": self.aggregate,
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=4, sort_keys=True)
        logging.info(f"Metric report written to {path}.")

    def to_csv(self, path):
        summary = pd.concat([self.per_scene, pd.DataFrame([{"scene": "mean", **self.aggregate}])], ignore_index=True)
        summary.to_csv(path, index=False)
        logging.info(f"Metric summary written to {path}.")

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            data = json.load(f)
        if "per_scene" not in data:
            raise ValueError(f"{path} is not a metric report.")
        frame = pd.DataFrame(data["per_scene"])
        if frame.empty:
            frame = pd.DataFrame(columns=list(METRICS))
        return cls(frame, data.get("meta"))

    def table(self):
        frame = pd.DataFrame([self.aggregate])
        return tabulate(frame.reset_index(drop=True), headers="keys", tablefmt="psql", floatfmt=".3f")

    def __repr__(self):
        return f"MetricReport({len(self.per_scene)} scenes, {self.aggregate})"

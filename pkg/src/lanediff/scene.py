"""
Synthetic lane scenes, occupancy rasters and their degradation.

Scenes are generated in the BEV perception window (lateral ``x`` in
[-15 m, 15 m], longitudinal ``y`` in [-30 m, 30 m]) and rasterized to a grid
whose rows follow ``y`` and whose columns follow ``x``. The degraded raster
is what the condition encoder sees, the clean one feeds the diffusion target.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import replace

import numpy as np

from .lane_graph import Point2
from .lane_graph import Polyline
from .lane_graph import SegmentGraph
from .lane_graph import validate

WINDOW = ((-15.0, 15.0), (-30.0, 30.0))
"""Default perception window ``((x_min, x_max), (y_min, y_max))`` in meters."""

DEFAULT_RESOLUTION = 0.9375
"""Meters per raster cell of the default 64 x 32 grid."""

RASTER_MAGIC = 4242.0
RASTER_VERSION = 1.0


@dataclass(frozen=True)
class SceneConfig:
    """
    Parameters of the synthetic lane-scene generator.

    Parameters
    ----------
    window : tuple
        Perception window ``((x_min, x_max), (y_min, y_max))`` in meters.
    lane_count : tuple of int
        Inclusive range of parallel lanes per scene.
    junction_prob : float
        Probability that a lane receives a split or a merge branch.
    curvature : tuple of float
        Range of the shared lane curvature in 1/m.
    lane_spacing : float
        Lateral distance between lane centerlines in meters.
    branch_angle : tuple of float
        Range of the branch angle at a junction in degrees.
    point_spacing : float
        Distance between generated polyline points in meters.
    margin : float
        Distance kept from the window border in meters.
    resolution : float
        Raster resolution in meters per cell.
    seed : int
        Seed of the scene's random generator.
    """

    window: tuple = WINDOW
    lane_count: tuple = (2, 4)
    junction_prob: float = 0.5
    curvature: tuple = (-0.004, 0.004)
    lane_spacing: float = 3.5
    branch_angle: tuple = (15.0, 30.0)
    point_spacing: float = 2.0
    margin: float = 0.5
    resolution: float = DEFAULT_RESOLUTION
    seed: int = 0

    def __post_init__(self):
        (x0, x1), (y0, y1) = self.window
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"Perception window {self.window} is empty.")
        if not 0.0 <= self.junction_prob <= 1.0:
            raise ValueError(f"junction_prob must lie in [0, 1], got {self.junction_prob}.")
        if self.lane_count[0] < 1 or self.lane_count[1] < self.lane_count[0]:
            raise ValueError(f"Invalid lane count range {self.lane_count}.")
        if max(abs(c) for c in self.curvature) > 0.1:
            raise ValueError(f"Curvature range {self.curvature} exceeds 0.1 1/m.")
        if self.lane_spacing <= 0 or self.point_spacing <= 0 or self.resolution <= 0:
            raise ValueError("Lane spacing, point spacing and resolution must be positive.")
        raster_shape(self.window, self.resolution)


@dataclass(frozen=True)
class DegradeConfig:
    """
    Parameters of the observation degradation.

    Parameters
    ----------
    boxes : tuple of int
        Inclusive range of occlusion boxes.
    box_size : tuple of float
        Range of box side lengths in meters.
    sigma : float
        Standard deviation of the additive Gaussian noise.
    dropout : float
        Probability of erasing a whole segment.
    seed : int
        Seed of the degradation's random generator.
    """

    boxes: tuple = (1, 3)
    box_size: tuple = (4.0, 10.0)
    sigma: float = 0.05
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"Noise sigma must be non-negative, got {self.sigma}.")
        if min(self.box_size) <= 0:
            raise ValueError(f"Occlusion box sizes must be positive, got {self.box_size}.")
        if self.boxes[0] < 0 or self.boxes[1] < self.boxes[0]:
            raise ValueError(f"Invalid occlusion box count range {self.boxes}.")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"Segment dropout must lie in [0, 1], got {self.dropout}.")


@dataclass(frozen=True, eq=False)
class OccupancyRaster:
    """
    Scalar field over the perception window.

    Parameters
    ----------
    grid : numpy.ndarray
        Values in [0, 1] of shape ``(H_r, W_r)``; row ``i`` covers
        ``y in [y0 + i r, y0 + (i + 1) r)``, column ``j`` the same along ``x``.
    resolution : float
        Cell size ``r`` in meters.
    origin : Point2
        Lower-left corner ``(x0, y0)`` of the window.
    """

    grid: np.ndarray
    resolution: float
    origin: Point2

    @property
    def shape(self):
        return self.grid.shape

    @property
    def window(self):
        h, w = self.grid.shape
        x0, y0 = self.origin
        return (x0, x0 + w * self.resolution), (y0, y0 + h * self.resolution)


def raster_shape(window, resolution):
    """
    Grid shape ``(H_r, W_r)`` that spans ``window`` at ``resolution`` exactly.

    Raises
    ------
    ValueError
        If the window extent is not an integer number of cells.
    """
    (x0, x1), (y0, y1) = window
    h, w = (y1 - y0) / resolution, (x1 - x0) / resolution
    rh, rw = int(round(h)), int(round(w))
    if abs(h - rh) > 1e-6 * max(1.0, h) or abs(w - rw) > 1e-6 * max(1.0, w) or rh < 1 or rw < 1:
        raise ValueError(f"Resolution {resolution} m does not divide the window {window} into whole cells.")
    return rh, rw


def _branch(start, heading, spacing, window, margin, backwards=False):
    """Straight branch from ``start`` until it leaves the window."""
    (x0, x1), (y0, y1) = window
    direction = np.array([np.sin(heading), np.cos(heading)]) * (-1.0 if backwards else 1.0)
    points = [np.asarray(start, dtype=float)]
    while True:
        nxt = points[-1] + spacing * direction
        if not (x0 + margin <= nxt[0] <= x1 - margin and y0 + margin <= nxt[1] <= y1 - margin):
            break
        points.append(nxt)
    pts = np.array(points)
    return pts[::-1] if backwards else pts


def _lane(x_offset, curvature, cfg):
    """Circular-arc lane running in +y, truncated at the window border."""
    (x0, x1), (y0, y1) = cfg.window
    m = cfg.margin
    s = np.arange(0.0, 2.0 * (y1 - y0), cfg.point_spacing)
    if abs(curvature) < 1e-12:
        x = np.full_like(s, x_offset)
        y = y0 + m + s
        heading = np.zeros_like(s)
    else:
        heading = curvature * s
        x = x_offset + (1.0 - np.cos(heading)) / curvature
        y = y0 + m + np.sin(heading) / curvature
    inside = (x >= x0 + m) & (x <= x1 - m) & (y <= y1 - m) & (np.abs(heading) < np.pi / 2)
    stop = len(s) if inside.all() else int(np.argmin(inside))
    return np.column_stack([x[:stop], y[:stop]]), heading[:stop]


def generate_scene(cfg):
    """
    Generate a synthetic centerline graph.

    Parallel lanes share one curvature. Each lane independently receives a
    split or a merge branch with probability ``cfg.junction_prob``; the lane
    is then cut at the junction into two segments with chain adjacency and
    the branch is attached as a third segment.

    Parameters
    ----------
    cfg : SceneConfig

    Returns
    -------
    SegmentGraph
        A graph passing :func:`lanediff.lane_graph.validate` inside the window.

    Raises
    ------
    ValueError
        If no lane fits laterally in the window.
    """
    rng = np.random.default_rng(cfg.seed)
    (x0, x1), _ = cfg.window
    usable = x1 - x0 - 2.0 * cfg.margin
    fit = int(np.floor(usable / cfg.lane_spacing)) + 1 if usable >= 0 else 0
    if fit < 1 or cfg.lane_spacing > (x1 - x0):
        raise ValueError(f"Lane spacing {cfg.lane_spacing} m does not fit a single lane in window {cfg.window}.")
    lo, hi = cfg.lane_count
    n_lanes = int(rng.integers(lo, hi + 1))
    if n_lanes > fit:
        logging.warning(f"Lane count {n_lanes} clamped to {fit} lanes fitting the window.")
        n_lanes = fit

    curvature = float(rng.uniform(*cfg.curvature))
    centre = 0.5 * (x0 + x1)
    segments = []
    pairs = []
    for i in range(n_lanes):
        jitter = rng.uniform(-0.25, 0.25)
        x_offset = centre + (i - 0.5 * (n_lanes - 1)) * cfg.lane_spacing + jitter
        x_offset = float(np.clip(x_offset, x0 + cfg.margin, x1 - cfg.margin))
        pts, heading = _lane(x_offset, curvature, cfg)
        has_junction = rng.random() < cfg.junction_prob
        kind = "split" if rng.random() < 0.5 else "merge"
        angle = np.deg2rad(rng.uniform(*cfg.branch_angle))
        if len(pts) < 2:
            continue
        if not has_junction or len(pts) < 6:
            segments.append(pts)
            continue

        k = int(rng.integers(len(pts) // 4, 3 * len(pts) // 4))
        k = min(max(k, 2), len(pts) - 3)
        side = 1.0 if pts[k, 0] >= centre else -1.0
        if kind == "split":
            branch = _branch(pts[k], heading[k] + side * angle, cfg.point_spacing, cfg.window, cfg.margin)
        else:
            branch = _branch(pts[k], heading[k] - side * angle, cfg.point_spacing, cfg.window, cfg.margin, True)
        if len(branch) < 2:
            segments.append(pts)
            continue

        a, b = len(segments), len(segments) + 1
        segments.extend([pts[: k + 1], pts[k:], branch])
        pairs.append((a, b))
        pairs.append((a, b + 1) if kind == "split" else (b + 1, b))

    graph = SegmentGraph.from_pairs([Polyline(p) for p in segments], pairs)
    violations = validate(graph, window=cfg.window)
    if violations:
        raise ValueError(f"Generated scene {cfg.seed} is invalid: {[v.message for v in violations]}")
    return graph


def generate_scenes(cfg, seeds, workers=1):
    """Generate one scene per seed, results in seed order."""
    configs = [replace(cfg, seed=int(s)) for s in seeds]
    if workers <= 1:
        return [generate_scene(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(generate_scene, configs))


def _cells(p0, p1, origin, resolution, shape):
    """Grid cells crossed by the segment ``p0 -> p1`` (4-connected traversal)."""
    h, w = shape
    u0 = (np.asarray(p0) - origin) / resolution
    u1 = (np.asarray(p1) - origin) / resolution
    ix, iy = int(np.floor(u0[0])), int(np.floor(u0[1]))
    ex, ey = int(np.floor(u1[0])), int(np.floor(u1[1]))
    d = u1 - u0
    sx, sy = int(np.sign(d[0])), int(np.sign(d[1]))
    tx = ((ix + (sx > 0)) - u0[0]) / d[0] if sx else np.inf
    ty = ((iy + (sy > 0)) - u0[1]) / d[1] if sy else np.inf
    dtx = abs(1.0 / d[0]) if sx else np.inf
    dty = abs(1.0 / d[1]) if sy else np.inf

    cells = [(iy, ix)]
    for _ in range(abs(ex - ix) + abs(ey - iy)):
        if (ix, iy) == (ex, ey):
            break
        if tx < ty:
            ix += sx
            tx += dtx
        else:
            iy += sy
            ty += dty
        cells.append((iy, ix))
    rows = np.clip([c[0] for c in cells], 0, h - 1)
    cols = np.clip([c[1] for c in cells], 0, w - 1)
    return rows, cols


def rasterize(g, resolution=DEFAULT_RESOLUTION, window=WINDOW):
    """
    Draw every polyline of ``g`` as a one-cell-wide line.

    Parameters
    ----------
    g : SegmentGraph
        Graph to draw.
    resolution : float
        Cell size in meters.
    window : tuple
        Perception window the raster spans.

    Returns
    -------
    OccupancyRaster
        Cells crossed by any polyline are 1, all others 0.
    """
    if resolution <= 0:
        raise ValueError(f"Raster resolution must be positive, got {resolution}.")
    shape = raster_shape(window, resolution)
    origin = np.array([window[0][0], window[1][0]])
    grid = np.zeros(shape)
    for seg in g.segments:
        for p0, p1 in zip(seg.points[:-1], seg.points[1:], strict=True):
            rows, cols = _cells(p0, p1, origin, resolution, shape)
            grid[rows, cols] = 1.0
    return OccupancyRaster(grid, float(resolution), Point2(*origin))


def degrade(r, cfg, graph=None):
    """
    Simulate occlusion, segment loss and sensor noise on a raster.

    Whole segments of ``graph`` are erased first (cells still covered by a
    kept segment survive), then occlusion boxes zero their cells, then
    Gaussian noise is added and the result clamped to [0, 1].

    Parameters
    ----------
    r : OccupancyRaster
        Clean raster.
    cfg : DegradeConfig
        Degradation parameters.
    graph : SegmentGraph, optional
        Graph that produced ``r``; required for segment dropout.

    Returns
    -------
    OccupancyRaster
    """
    rng = np.random.default_rng(cfg.seed)
    grid = np.array(r.grid, dtype=float)
    (x0, x1), (y0, y1) = r.window

    if cfg.dropout > 0:
        if graph is None:
            logging.warning("Segment dropout requested without a graph, skipping dropout.")
        elif len(graph):
            drop = rng.random(len(graph)) < cfg.dropout
            if drop.any():
                kept = SegmentGraph([s for s, d in zip(graph.segments, drop, strict=True) if not d])
                lost = SegmentGraph([s for s, d in zip(graph.segments, drop, strict=True) if d])
                kept_cells = rasterize(kept, r.resolution, r.window).grid > 0
                lost_cells = rasterize(lost, r.resolution, r.window).grid > 0
                grid[lost_cells & ~kept_cells] = 0.0

    h, w = grid.shape
    cx = x0 + (np.arange(w) + 0.5) * r.resolution
    cy = y0 + (np.arange(h) + 0.5) * r.resolution
    for _ in range(int(rng.integers(cfg.boxes[0], cfg.boxes[1] + 1))):
        bw, bh = rng.uniform(*cfg.box_size, size=2)
        bx, by = rng.uniform(x0, x1), rng.uniform(y0, y1)
        cols = np.abs(cx - bx) <= bw / 2
        rows = np.abs(cy - by) <= bh / 2
        grid[np.ix_(rows, cols)] = 0.0

    if cfg.sigma > 0:
        grid = np.clip(grid + rng.normal(0.0, cfg.sigma, grid.shape), 0.0, 1.0)
    return OccupancyRaster(grid, r.resolution, r.origin)


def save_raster(r, path):
    """
    Write a raster as little-endian float32 with an 8-value header.

    The header holds magic, version, ``H_r``, ``W_r``, resolution x 1000,
    origin x and y x 1000 and a reserved zero.
    """
    h, w = r.grid.shape
    header = [RASTER_MAGIC, RASTER_VERSION, h, w, r.resolution * 1000, r.origin.x * 1000, r.origin.y * 1000, 0.0]
    with open(path, "wb") as f:
        f.write(np.asarray(header, dtype="<f4").tobytes())
        f.write(np.asarray(r.grid, dtype="<f4").tobytes())


def load_raster(path):
    """Read a raster written by :func:`save_raster`."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    data = np.fromfile(path, dtype="<f4")
    if len(data) < 8 or data[0] != RASTER_MAGIC:
        raise ValueError(f"{path} is not a lanediff raster file.")
    if data[1] != RASTER_VERSION:
        raise ValueError(f"Unsupported raster version {data[1]} in {path}.")
    h, w = int(data[2]), int(data[3])
    if len(data) != 8 + h * w:
        raise ValueError(f"Raster file {path} is truncated.")
    grid = data[8:].astype(float).reshape(h, w)
    return OccupancyRaster(grid, float(data[4]) / 1000, Point2(float(data[5]) / 1000, float(data[6]) / 1000))

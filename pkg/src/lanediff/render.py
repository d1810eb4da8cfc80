"""
Image export of rasters, feature channels and graph overlays.

Images are written as PNG through :func:`matplotlib.image.imsave` or as
binary PPM (``P6``). Row 0 of a grid is the southern edge of the window, so
rows are flipped to put the driving direction up.
"""

import logging
import os

import matplotlib.image as mpimg
import numpy as np

from .lane_graph import SegmentGraph
from .lpim import BevGrid
from .scene import DEFAULT_RESOLUTION
from .scene import WINDOW
from .scene import OccupancyRaster
from .scene import rasterize

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)
FORMATS = (".png", ".ppm")


def to_gray(grid, normalize=False):
    """``uint8`` image of a 2-D grid, rows flipped; values clamp to [0, 1] unless normalized."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError(f"Expected a 2-D grid, got shape {grid.shape}.")
    if normalize:
        lo, hi = float(grid.min()), float(grid.max())
        grid = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    return np.round(np.clip(grid, 0.0, 1.0) * 255).astype(np.uint8)[::-1]


def overlay(gt, pred=None, resolution=DEFAULT_RESOLUTION, window=WINDOW):
    """
    RGB image of rasterized graphs, rows flipped.

    Ground-truth cells are green, predicted cells red and shared cells
    yellow.
    """
    gt_cells = rasterize(gt, resolution, window).grid > 0
    image = np.zeros((*gt_cells.shape, 3), dtype=np.uint8)
    image[gt_cells] = GT_COLOR
    if pred is not None:
        pred_cells = rasterize(pred, resolution, window).grid > 0
        image[pred_cells, 0] = PRED_COLOR[0]
    return image[::-1]


def write_image(image, path):
    """
    Write a ``uint8`` gray ``(H, W)`` or RGB ``(H, W, 3)`` image.

    Raises
    ------
    ValueError
        If the file suffix is neither ``.png`` nor ``.ppm``.
    OSError
        If ``path`` is not writable.
    """
    path = os.fspath(path)
    suffix = os.path.splitext(path)[1].lower()
    if suffix not in FORMATS:
        raise ValueError(f"Unsupported image format '{suffix}', expected one of {FORMATS}.")
    rgb = image if image.ndim == 3 else np.repeat(image[..., None], 3, axis=-1)
    if suffix == ".ppm":
        h, w = rgb.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    elif image.ndim == 2:
        mpimg.imsave(path, image, cmap="gray", vmin=0, vmax=255, metadata={"Software": None})
    else:
        mpimg.imsave(path, image, metadata={"Software": None})
    logging.info(f"Image {image.shape[1]}x{image.shape[0]} written to {path}.")
    return path


def read_image(path):
    """Read a PNG or PPM written by :func:`write_image` back into ``uint8`` RGB rows as stored."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    if path.lower().endswith(".ppm"):
        with open(path, "rb") as f:
            parts = f.read().split(b"\n", 3)
        if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
            raise ValueError(f"{path} is not a binary 8-bit PPM.")
        w, h = (int(v) for v in parts[1].split())
        return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
    image = mpimg.imread(path)
    if image.dtype != np.uint8:
        image = np.round(image * 255).astype(np.uint8)
    return image[..., :3]


def render(artifact, path, channel=0, resolution=DEFAULT_RESOLUTION, window=WINDOW):
    """
    Render an artifact into an image file.

    Parameters
    ----------
    artifact : OccupancyRaster, BevGrid, SegmentGraph or tuple
        A raster (gray), a feature grid (one min-max normalized channel), a
        graph (green) or a ``(gt, pred)`` pair of graphs (green and red).
    path : str
        Output file ending in ``.png`` or ``.ppm``.
    channel : int
        Feature channel of a :class:`BevGrid`.
    resolution : float
        Raster resolution of graph renders.
    window : tuple
        Perception window of graph renders.

    Returns
    -------
    str
        The written path.
    """
    if isinstance(artifact, OccupancyRaster):
        image = to_gray(artifact.grid)
    elif isinstance(artifact, BevGrid):
        if not 0 <= channel < artifact.shape[0]:
            raise ValueError(f"Channel {channel} outside the {artifact.shape[0]} feature channels.")
        image = to_gray(artifact.features[channel], normalize=True)
    elif isinstance(artifact, SegmentGraph):
        image = overlay(artifact, None, resolution, window)
    elif isinstance(artifact, tuple) and len(artifact) == 2:
        image = overlay(artifact[0], artifact[1], resolution, window)
    else:
        raise ValueError(f"Cannot render an artifact of type {type(artifact).__name__}.")
    return write_image(image, path)

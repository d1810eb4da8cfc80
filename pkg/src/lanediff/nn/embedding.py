import numpy as np


def sinusoidal_embed(value, dim):
    r"""
    Sinusoidal embedding with geometric frequencies.

    Parameters
    ----------
    value : float or array_like
        Scalar or array of values to embed.
    dim : int
        Embedding size, even and at least 2.

    Returns
    -------
    numpy.ndarray
        Array of shape ``value.shape + (dim,)`` holding the interleaved pairs
        :math:`(\sin(v/\omega_k), \cos(v/\omega_k))` with
        :math:`\omega_k = 10000^{2k/\mathrm{dim}}`, :math:`k = 0 \dots \mathrm{dim}/2 - 1`.

    Raises
    ------
    ValueError
        If ``dim`` is odd or smaller than 2.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"Sinusoidal embedding size must be even and at least 2, got {dim}.")
    v = np.asarray(value, dtype=float)[..., None]
    omega = 10000.0 ** (2.0 * np.arange(dim // 2) / dim)
    out = np.empty(v.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(v / omega)
    out[..., 1::2] = np.cos(v / omega)
    return out


def grid_embed(window, shape, dim):
    """
    Sinusoidal features of the cell centers of a grid over ``window``.

    Parameters
    ----------
    window : tuple
        ``((x_min, x_max), (y_min, y_max))`` in meters.
    shape : tuple of int
        Grid shape ``(H, W)``; rows follow ``y`` and columns follow ``x``.
    dim : int
        Embedding size per coordinate.

    Returns
    -------
    numpy.ndarray
        Array of shape ``(H W, 2 dim)`` in row-major cell order.
    """
    (x0, x1), (y0, y1) = window
    h, w = shape
    xs = x0 + (np.arange(w) + 0.5) * (x1 - x0) / w
    ys = y0 + (np.arange(h) + 0.5) * (y1 - y0) / h
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.concatenate([sinusoidal_embed(xx.ravel(), dim), sinusoidal_embed(yy.ravel(), dim)], axis=1)

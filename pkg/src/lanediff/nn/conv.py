"""
Convolution and resampling layers on single feature maps of shape ``(C, H, W)``.

Convolutions use "same" zero padding and are evaluated through an im2col
matrix product; the backward pass scatters the column gradient back with
the matching col2im accumulation.
"""

import numpy as np

from .dense import uniform_init
from .layer import Layer
from .layer import layer_registry


def im2col(x, k):
    """Columns of all ``k x k`` neighbourhoods, shape ``(C k k, H W)``."""
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + h, j : j + w]
    return cols.reshape(c * k * k, h * w)


def col2im(cols, shape, k):
    c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, h, w)
    dxp = np.zeros((c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + h, j : j + w] += cols[:, i, j]
    return dxp[:, p : p + h, p : p + w]


@layer_registry
class Conv2d(Layer):
    r"""
    Two-dimensional convolution with odd kernel and same padding.

    Parameters
    ----------
    name : str
        Parameter prefix.
    c_in : int
        Input channels.
    c_out : int
        Output channels.
    k : int
        Kernel size, 1 or 3.
    init : str
        ``"uniform"``, ``"zeros"`` or ``"identity"`` (1x1 only, ``c_in == c_out``).
    """

    def __init__(self, name, c_in, c_out, k=3, init="uniform"):
        super().__init__(name)
        if k not in (1, 3):
            raise ValueError(f"Only 1x1 and 3x3 kernels are supported, got {k}.")
        if init not in ("uniform", "zeros", "identity"):
            raise ValueError(f"Unknown convolution initialization '{init}'.")
        if init == "identity" and (k != 1 or c_in != c_out):
            raise ValueError("Identity initialization needs a 1x1 kernel with c_in == c_out.")
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.init = init

    def param_shapes(self):
        return {self.key("W"): (self.c_out, self.c_in, self.k, self.k), self.key("b"): (self.c_out,)}

    def init_params(self, rng):
        shape = (self.c_out, self.c_in, self.k, self.k)
        if self.init == "uniform":
            w = uniform_init(rng, shape, self.c_in * self.k * self.k)
        elif self.init == "identity":
            w = np.eye(self.c_in).reshape(shape)
        else:
            w = np.zeros(shape)
        return {self.key("W"): w, self.key("b"): np.zeros(self.c_out)}

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.c_in:
            raise ValueError(f"{self} expects ({self.c_in}, H, W) input, got {tuple(input_shape)}.")
        return (self.c_out, *input_shape[1:])

    def forward(self, params, x):
        self.output_shape(x.shape)
        cols = im2col(x, self.k)
        w = self.p(params, "W").reshape(self.c_out, -1)
        y = w @ cols + self.p(params, "b")[:, None]
        return y.reshape(self.c_out, *x.shape[1:]), (cols, x.shape)

    def backward(self, params, cache, dy):
        cols, shape = cache
        dy2 = dy.reshape(self.c_out, -1)
        w = self.p(params, "W").reshape(self.c_out, -1)
        grads = {
            self.key("W"): (dy2 @ cols.T).reshape(self.c_out, self.c_in, self.k, self.k),
            self.key("b"): dy2.sum(axis=1),
        }
        return col2im(w.T @ dy2, shape, self.k), grads


@layer_registry
class AvgPool2(Layer):
    """2x2 average pooling with stride 2, even spatial extents only."""

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h % 2 or w % 2:
            raise ValueError(f"{self} needs even spatial extents, got {tuple(input_shape)}.")
        return (c, h // 2, w // 2)

    def forward(self, params, x):
        c, h, w = self.output_shape(x.shape)
        return x.reshape(c, h, 2, w, 2).mean(axis=(2, 4)), None

    def backward(self, params, cache, dy):
        return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) / 4.0, {}


@layer_registry
class Upsample2(Layer):
    """Nearest-neighbour upsampling by a factor of 2."""

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, 2 * h, 2 * w)

    def forward(self, params, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), None

    def backward(self, params, cache, dy):
        c, h, w = dy.shape
        return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4)), {}

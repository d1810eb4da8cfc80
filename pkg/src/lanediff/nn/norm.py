import numpy as np

from .layer import Layer
from .layer import layer_registry


@layer_registry
class GroupNorm(Layer):
    r"""
    Group normalization of a ``(C, H, W)`` feature map.

    Channels are split into ``groups`` groups; every group is normalized to
    zero mean and unit variance over its channels and all positions, then
    scaled and shifted per channel.

    .. math::

        y = \gamma_c \frac{x - \mu_g}{\sqrt{\sigma_g^2 + \epsilon}} + \beta_c

    Parameters
    ----------
    name : str
        Parameter prefix.
    channels : int
        Number of channels ``C``.
    groups : int
        Number of groups, must divide ``C``.
    eps : float
        Variance offset.
    """

    def __init__(self, name, channels, groups=4, eps=1e-5):
        super().__init__(name)
        if channels % groups:
            raise ValueError(f"{groups} groups do not divide {channels} channels.")
        self.channels = channels
        self.groups = groups
        self.eps = eps

    def param_shapes(self):
        return {self.key("gamma"): (self.channels,), self.key("beta"): (self.channels,)}

    def init_params(self, rng):
        return {self.key("gamma"): np.ones(self.channels), self.key("beta"): np.zeros(self.channels)}

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.channels:
            raise ValueError(f"{self} expects ({self.channels}, H, W) input, got {tuple(input_shape)}.")
        return tuple(input_shape)

    def forward(self, params, x):
        self.output_shape(x.shape)
        c, h, w = x.shape
        xg = x.reshape(self.groups, -1)
        mu = xg.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(xg.var(axis=1, keepdims=True) + self.eps)
        xhat = ((xg - mu) * inv).reshape(c, h, w)
        y = xhat * self.p(params, "gamma")[:, None, None] + self.p(params, "beta")[:, None, None]
        return y, (xhat, inv)

    def backward(self, params, cache, dy):
        xhat, inv = cache
        c, h, w = dy.shape
        grads = {
            self.key("gamma"): (dy * xhat).sum(axis=(1, 2)),
            self.key("beta"): dy.sum(axis=(1, 2)),
        }
        dxhat = (dy * self.p(params, "gamma")[:, None, None]).reshape(self.groups, -1)
        xh = xhat.reshape(self.groups, -1)
        n = xh.shape[1]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True) - xh * (dxhat * xh).sum(axis=1, keepdims=True))
        return dx.reshape(c, h, w), grads

import numpy as np

from .layer import Layer
from .layer import layer_registry


def uniform_init(rng, shape, fan_in):
    r"""Uniform initialization in :math:`\pm 1/\sqrt{\mathrm{fan\_in}}`."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@layer_registry
class Dense(Layer):
    r"""
    Affine map over the last axis, :math:`y = x W + b`.

    Parameters
    ----------
    name : str
        Parameter prefix.
    n_in : int
        Input features.
    n_out : int
        Output features.
    bias : bool
        Whether the layer has a bias.
    init : str
        ``"uniform"``, ``"zeros"`` or ``"identity"`` (requires ``n_in == n_out``).
    """

    def __init__(self, name, n_in, n_out, bias=True, init="uniform"):
        super().__init__(name)
        if init not in ("uniform", "zeros", "identity"):
            raise ValueError(f"Unknown dense initialization '{init}'.")
        if init == "identity" and n_in != n_out:
            raise ValueError(f"Identity initialization needs n_in == n_out, got {n_in} and {n_out}.")
        self.n_in = n_in
        self.n_out = n_out
        self.bias = bias
        self.init = init

    def param_shapes(self):
        shapes = {self.key("W"): (self.n_in, self.n_out)}
        if self.bias:
            shapes[self.key("b")] = (self.n_out,)
        return shapes

    def init_params(self, rng):
        if self.init == "uniform":
            w = uniform_init(rng, (self.n_in, self.n_out), self.n_in)
        elif self.init == "identity":
            w = np.eye(self.n_in)
        else:
            w = np.zeros((self.n_in, self.n_out))
        params = {self.key("W"): w}
        if self.bias:
            params[self.key("b")] = np.zeros(self.n_out)
        return params

    def output_shape(self, input_shape):
        if input_shape[-1] != self.n_in:
            raise ValueError(f"{self} expects {self.n_in} input features, got shape {tuple(input_shape)}.")
        return (*input_shape[:-1], self.n_out)

    def forward(self, params, x):
        self.output_shape(x.shape)
        y = x @ self.p(params, "W")
        if self.bias:
            y = y + self.p(params, "b")
        return y, x

    def backward(self, params, cache, dy):
        x = cache
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        grads = {self.key("W"): x2.T @ dy2}
        if self.bias:
            grads[self.key("b")] = dy2.sum(axis=0)
        return dy @ self.p(params, "W").T, grads

"""
Layer composition with shape checking.

A :class:`Sequential` is the declarative description of a network: its
layers are validated against an input shape at construction, and the module
level :func:`forward` and :func:`backward` evaluate any such description on
a parameter dictionary.
"""

from .layer import Layer
from .layer import layer_registry


@layer_registry
class Sequential(Layer):
    """
    Chain of layers applied in order.

    Parameters
    ----------
    name : str
        Name of the composition (its layers keep their own prefixes).
    layers : sequence of Layer
        The layers.
    input_shape : tuple, optional
        When given, shape compatibility of adjacent layers is checked
        immediately.

    Raises
    ------
    ValueError
        If two adjacent layers have incompatible shapes or two layers own a
        parameter with the same name.
    """

    def __init__(self, name, layers, input_shape=None):
        super().__init__(name)
        self.layers = list(layers)
        seen = {}
        for layer in self.layers:
            for key in layer.param_shapes():
                if key in seen:
                    raise ValueError(f"Parameter '{key}' is owned by both {seen[key]} and {layer}.")
                seen[key] = layer
        if input_shape is not None:
            self.output_shape(input_shape)

    def param_shapes(self):
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, rng):
        params = {}
        for layer in self.layers:
            params.update(layer.init_params(rng))
        return params

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, params, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            caches.append(cache)
        return x, caches

    def backward(self, params, cache, dy):
        grads = {}
        for layer, c in zip(reversed(self.layers), reversed(cache), strict=True):
            dy, g = layer.backward(params, c, dy)
            for key, value in g.items():
                grads[key] = grads[key] + value if key in grads else value
        return dy, grads


@layer_registry
class Residual(Layer):
    """``y = x + inner(x)`` around any shape-preserving layer."""

    def __init__(self, name, inner):
        super().__init__(name)
        self.inner = inner

    def param_shapes(self):
        return self.inner.param_shapes()

    def init_params(self, rng):
        return self.inner.init_params(rng)

    def output_shape(self, input_shape):
        out = self.inner.output_shape(input_shape)
        if tuple(out) != tuple(input_shape):
            raise ValueError(f"{self} wraps {self.inner} which maps {tuple(input_shape)} to {tuple(out)}.")
        return out

    def forward(self, params, x):
        y, cache = self.inner.forward(params, x)
        return x + y, cache

    def backward(self, params, cache, dy):
        dx, grads = self.inner.backward(params, cache, dy)
        return dy + dx, grads


def forward(layer, params, x):
    """Evaluate a layer or composition, pure in its inputs."""
    return layer.forward(params, x)[0]


def backward(layer, params, x, dy):
    """
    Gradients of ``sum(dy * layer(x))`` with respect to ``x`` and every parameter.

    Returns
    -------
    tuple
        ``(dx, grads)`` where ``grads`` maps parameter names to arrays.
    """
    y, cache = layer.forward(params, x)
    if y.shape != dy.shape:
        raise ValueError(f"Output gradient shape {dy.shape} does not match output shape {y.shape}.")
    return layer.backward(params, cache, dy)

import numpy as np

from ..functions import sigmoid
from .layer import Layer
from .layer import layer_registry

_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    r"""
    Tanh approximation of the Gaussian error linear unit.

    .. math::

        \mathrm{GELU}(x) = \frac{x}{2}\left(1 + \tanh\left(\sqrt{2/\pi}
        \left(x + 0.044715 x^3\right)\right)\right)
    """
    return 0.5 * x * (1.0 + np.tanh(_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    t = np.tanh(_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _C * (1.0 + 3 * 0.044715 * x**2)


@layer_registry
class GELU(Layer):
    def __init__(self, name="gelu"):
        super().__init__(name)

    def forward(self, params, x):
        return gelu(x), x

    def backward(self, params, cache, dy):
        return dy * gelu_grad(cache), {}


@layer_registry
class Sigmoid(Layer):
    def __init__(self, name="sigmoid"):
        super().__init__(name)

    def forward(self, params, x):
        y = sigmoid(x)
        return y, y

    def backward(self, params, cache, dy):
        return dy * cache * (1.0 - cache), {}

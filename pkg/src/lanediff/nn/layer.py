"""Base class and registry of the trainable layers."""


def layer_registry(cls):
    """Class decorator adding ``cls`` to ``layer_registry.items`` under its class name."""
    layer_registry.items[cls.__name__] = cls
    return cls


layer_registry.items = {}


def build_layer(kind, **kwargs):
    """
    Instantiate a registered layer by its class name.

    Parameters
    ----------
    kind : str
        Class name under which the layer was registered.
    **kwargs
        Constructor arguments.

    Returns
    -------
    lanediff.nn.Layer
    """
    layer_class = layer_registry.items.get(kind)
    if layer_class is None:
        raise ValueError(f"Layer type '{kind}' is not registered.")
    return layer_class(**kwargs)


@layer_registry
class Layer:
    r"""
    Base class for all lanediff layers.

    A layer is a stateless description of a differentiable function. Its
    parameters live in a flat ``dict`` (or :class:`lanediff.nn.ParamStore`)
    under the keys ``f"{name}.{key}"``, so several layers and whole models can
    share one parameter namespace.

    Parameters
    ----------
    name : str
        Parameter prefix of the layer.

    Notes
    -----
    Child classes implement

    - :meth:`param_shapes`: local parameter keys and shapes,
    - :meth:`init_params`: initial values,
    - :meth:`output_shape`: the shape contract,
    - :meth:`forward`: ``(y, cache)`` from parameters and input,
    - :meth:`backward`: ``(dx, grads)`` from the cache and the output gradient.
    """

    parts = ()

    def __init__(self, name):
        self.name = name

    def key(self, local):
        return f"{self.name}.{local}"

    def p(self, params, local):
        return params[self.key(local)]

    def param_shapes(self):
        """Mapping of full parameter names to shapes, gathered from ``parts``."""
        shapes = {}
        for part in self.parts:
            shapes.update(part.param_shapes())
        return shapes

    def init_params(self, rng):
        """Mapping of full parameter names to initial arrays, gathered from ``parts``."""
        params = {}
        for part in self.parts:
            params.update(part.init_params(rng))
        return params

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, params, x):
        raise NotImplementedError(f"{type(self).__name__} does not implement forward.")

    def backward(self, params, cache, dy):
        raise NotImplementedError(f"{type(self).__name__} does not implement backward.")

    def __call__(self, params, x):
        return self.forward(params, x)[0]

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"

r"""
Lane prior refinement: fusion of the generated feature with the condition.

Five variants are available:

- ``no_refine``: :math:`\hat{x}_g = x_g`, no parameters.
- ``concat_fc`` / ``concat_ed``: the body sees :math:`[x_g, x_c]` and the
  residual comes from :math:`x_g`.
- ``add_fc`` / ``add_ed``: the body sees :math:`z = x_g + x_c` and the
  residual comes from :math:`z`.

``fc`` is a 1x1 convolution block, ``ed`` a two-level encoder-decoder with
one skip connection. The last layer of every body is zero-initialized, so a
fresh refinement is the identity of its residual input.
"""

import numpy as np

from .nn import GELU
from .nn import AvgPool2
from .nn import Conv2d
from .nn import GroupNorm
from .nn import Layer
from .nn import Sequential
from .nn import Upsample2
from .nn import accumulate
from .nn import layer_registry

VARIANTS = ("no_refine", "concat_fc", "concat_ed", "add_fc", "add_ed")


@layer_registry
class EncoderDecoder(Layer):
    """
    Two-level convolutional encoder-decoder with one skip connection.

    ``conv3x3(in -> C) + GELU`` (skip), pool, ``conv3x3(C -> C) + GELU``,
    upsample, concatenation with the skip, ``conv3x3(2C -> C) + GELU``,
    ``conv1x1(C -> C)``.
    """

    def __init__(self, name, c_in, channels, zero_last=True):
        super().__init__(name)
        self.channels = channels
        self.enc = Conv2d(f"{name}.enc", c_in, channels, 3)
        self.mid = Conv2d(f"{name}.mid", channels, channels, 3)
        self.dec = Conv2d(f"{name}.dec", 2 * channels, channels, 3)
        self.out = Conv2d(f"{name}.out", channels, channels, 1, init="zeros" if zero_last else "uniform")
        self.pool = AvgPool2("pool")
        self.up = Upsample2("up")
        self.act = GELU()
        self.parts = (self.enc, self.mid, self.dec, self.out)

    def output_shape(self, input_shape):
        self.pool.output_shape(self.enc.output_shape(input_shape))
        return (self.channels, *input_shape[1:])

    def forward(self, params, x):
        e, c_enc = self.enc.forward(params, x)
        skip, c_a1 = self.act.forward(params, e)
        m, c_mid = self.mid.forward(params, self.pool.forward(params, skip)[0])
        m, c_a2 = self.act.forward(params, m)
        d, c_dec = self.dec.forward(params, np.concatenate([self.up.forward(params, m)[0], skip]))
        d, c_a3 = self.act.forward(params, d)
        y, c_out = self.out.forward(params, d)
        return y, (c_enc, c_a1, c_mid, c_a2, c_dec, c_a3, c_out)

    def backward(self, params, cache, dy):
        c_enc, c_a1, c_mid, c_a2, c_dec, c_a3, c_out = cache
        grads = {}
        dd, g = self.out.backward(params, c_out, dy)
        accumulate(grads, g)
        dd, _ = self.act.backward(params, c_a3, dd)
        dcat, g = self.dec.backward(params, c_dec, dd)
        accumulate(grads, g)
        dm, _ = self.up.backward(params, None, dcat[: self.channels])
        dm, _ = self.act.backward(params, c_a2, dm)
        dp, g = self.mid.backward(params, c_mid, dm)
        accumulate(grads, g)
        dskip = dcat[self.channels :] + self.pool.backward(params, None, dp)[0]
        de, _ = self.act.backward(params, c_a1, dskip)
        dx, g = self.enc.backward(params, c_enc, de)
        accumulate(grads, g)
        return dx, grads


def fc_body(name, c_in, channels, groups=2):
    """``conv1x1(in -> C)``, GroupNorm, GELU, zero-initialized ``conv1x1(C -> C)``."""
    return Sequential(
        name,
        [
            Conv2d(f"{name}.0", c_in, channels, 1),
            GroupNorm(f"{name}.norm", channels, groups),
            GELU(),
            Conv2d(f"{name}.1", channels, channels, 1, init="zeros"),
        ],
    )


@layer_registry
class Refiner(Layer):
    """
    One refinement variant over ``C``-channel features.

    Parameters
    ----------
    variant : str
        One of :data:`VARIANTS`.
    channels : int
        Feature channels ``C``.
    name : str
        Parameter prefix.
    groups : int
        Group-norm groups of the ``fc`` body.
    """

    def __init__(self, variant, channels=8, name="refine", groups=2):
        super().__init__(name)
        if variant not in VARIANTS:
            raise ValueError(f"Unknown refine variant '{variant}', expected one of {VARIANTS}.")
        self.variant = variant
        self.channels = channels
        self.body = None
        if variant != "no_refine":
            fusion, head = variant.split("_")
            c_in = 2 * channels if fusion == "concat" else channels
            body_name = f"{name}.{head}"
            if head == "fc":
                self.body = fc_body(body_name, c_in, channels, groups)
            else:
                self.body = EncoderDecoder(body_name, c_in, channels)
            self.parts = (self.body,)

    @property
    def fusion(self):
        return None if self.body is None else self.variant.split("_")[0]

    def check_params(self, params):
        """
        Raise if ``params`` does not hold exactly this variant's parameters.

        Raises
        ------
        ValueError
            On a missing, extra or mis-shaped refinement parameter.
        """
        shapes = self.param_shapes()
        owned = {n for n in params if n.startswith(f"{self.name}.")}
        missing = sorted(set(shapes) - owned)
        extra = sorted(owned - set(shapes))
        if missing or extra:
            raise ValueError(
                f"Parameters do not match refine variant '{self.variant}': missing {missing}, unexpected {extra}."
            )
        for n, shape in shapes.items():
            if np.shape(params[n]) != tuple(shape):
                raise ValueError(f"Parameter '{n}' has shape {np.shape(params[n])}, expected {tuple(shape)}.")

    def forward(self, params, xg, xc):
        if np.shape(xg) != np.shape(xc):
            raise ValueError(f"x_g shape {np.shape(xg)} does not match x_c shape {np.shape(xc)}.")
        if self.body is None:
            return xg, None
        if self.fusion == "concat":
            residual, body_in = xg, np.concatenate([xg, xc])
        else:
            residual = body_in = xg + xc
        y, cache = self.body.forward(params, body_in)
        return residual + y, cache

    def backward(self, params, cache, dy):
        """Returns ``(dxg, dxc, grads)``."""
        if self.body is None:
            return dy, np.zeros_like(dy), {}
        din, grads = self.body.backward(params, cache, dy)
        if self.fusion == "concat":
            c = self.channels
            return dy + din[:c], din[c:], grads
        return dy + din, dy + din, grads


def refine(xg, xc, variant, params, channels=None):
    """
    Fuse ``x_g`` with ``x_c`` using ``variant`` and its parameters.

    Raises
    ------
    ValueError
        If the parameters do not belong to ``variant`` or the shapes differ.
    """
    xg = np.asarray(getattr(xg, "features", xg), dtype=float)
    xc = np.asarray(getattr(xc, "features", xc), dtype=float)
    refiner = Refiner(variant, xg.shape[0] if channels is None else channels)
    refiner.check_params(params)
    return refiner.forward(params, xg, xc)[0]

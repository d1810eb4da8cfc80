"""
Lane prior injection.

Ground-truth centerlines are encoded into one token per line
(:class:`PriorEncoder`) and cross-attended into the condition encoder's
intermediate feature maps (:class:`Injector`). The condition encoder
(:class:`ConditionEncoder`) maps an occupancy raster to a ``C``-channel
:class:`BevGrid`; run without tokens it yields the condition feature
:math:`x_c`, run on the clean raster with the ground-truth tokens it yields
the diffusion target :math:`x_0`.
"""

from dataclasses import dataclass

import numpy as np

from .lane_graph import resample_polyline
from .nn import GELU
from .nn import Attention
from .nn import Conv2d
from .nn import Dense
from .nn import GroupNorm
from .nn import Layer
from .nn import Residual
from .nn import Sequential
from .nn import accumulate
from .nn import grid_embed
from .nn import layer_registry
from .nn import sinusoidal_embed
from .scene import WINDOW


@dataclass(frozen=True, eq=False)
class BevGrid:
    """
    Feature grid over the perception window.

    Parameters
    ----------
    features : numpy.ndarray
        Array of shape ``(C, H_b, W_b)``.
    window : tuple
        ``((x_min, x_max), (y_min, y_max))`` covered by the grid.
    """

    features: np.ndarray
    window: tuple = WINDOW

    def __post_init__(self):
        if np.ndim(self.features) != 3:
            raise ValueError(f"BEV features must have shape (C, H, W), got {np.shape(self.features)}.")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("BEV features must be finite.")

    @property
    def shape(self):
        return self.features.shape


@dataclass(frozen=True, eq=False)
class PriorTokens:
    """One ``H``-dimensional token per centerline, shape ``(M, H)``."""

    tokens: np.ndarray

    @property
    def M(self):
        return self.tokens.shape[0]


def polyline_features(g, n, d):
    """
    Point embeddings of every centerline, shape ``(M, n, 2 d)``.

    Each line is resampled to ``n`` points and every point is embedded as
    ``concat(sinusoidal(x, d), sinusoidal(y, d))``.
    """
    if not len(g):
        return np.zeros((0, n, 2 * d))
    points = np.stack([resample_polyline(s, n).points for s in g.segments])
    return np.concatenate([sinusoidal_embed(points[..., 0], d), sinusoidal_embed(points[..., 1], d)], axis=-1)


@layer_registry
class PriorEncoder(Layer):
    r"""
    Transformer encoder turning centerlines into prior tokens.

    The per-point embeddings of a line are projected to ``H`` and mean-pooled
    into one token; ``L`` blocks of residual self-attention and a residual
    feed-forward layer then mix the ``M`` tokens. Tokens carry no positional
    encoding, so the encoder is equivariant under reordering of the lines.

    Parameters
    ----------
    name : str
        Parameter prefix.
    n_points : int
        Points per resampled centerline ``N``.
    embed_dim : int
        Sinusoidal embedding size ``d`` per coordinate.
    hidden : int
        Token size ``H``.
    layers : int
        Number of attention blocks ``L``.
    heads : int
        Attention heads.
    """

    def __init__(self, name="prior", n_points=20, embed_dim=32, hidden=32, layers=2, heads=1):
        super().__init__(name)
        self.n_points = n_points
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.proj = Dense(f"{name}.proj", 2 * embed_dim, hidden)
        blocks = []
        for i in range(layers):
            blocks.append(Residual(f"{name}.attn{i}", Attention(f"{name}.attn{i}", hidden, heads=heads)))
            ff = Sequential(
                f"{name}.ff{i}",
                [Dense(f"{name}.ff{i}.0", hidden, 2 * hidden), GELU(), Dense(f"{name}.ff{i}.1", 2 * hidden, hidden)],
            )
            blocks.append(Residual(f"{name}.ff{i}", ff))
        self.blocks = Sequential(f"{name}.blocks", blocks, input_shape=(1, hidden))
        self.parts = (self.proj, self.blocks)

    def forward(self, params, g):
        feats = polyline_features(g, self.n_points, self.embed_dim)
        if not len(feats):
            return np.zeros((0, self.hidden)), None
        projected, c_proj = self.proj.forward(params, feats)
        tokens, c_blocks = self.blocks.forward(params, projected.mean(axis=1))
        return tokens, (c_proj, c_blocks)

    def backward(self, params, cache, dtokens):
        """Parameter gradients; the graph input has no gradient."""
        if cache is None:
            return None, {}
        c_proj, c_blocks = cache
        dpooled, grads = self.blocks.backward(params, c_blocks, dtokens)
        dprojected = np.repeat(dpooled[:, None, :], self.n_points, axis=1) / self.n_points
        _, g_proj = self.proj.backward(params, c_proj, dprojected)
        return None, accumulate(grads, g_proj)


@layer_registry
class Injector(Layer):
    r"""
    Cross-attention of grid cells into prior tokens with a residual.

    Every cell queries with its features concatenated to a sinusoidal
    embedding of its center; the tokens act as keys and values.

    .. math::

        F' = F + \mathrm{Attn}([F, P], T)

    With no tokens, or with a zero output projection, ``F' = F``.
    """

    def __init__(self, name, channels, token_dim, attn_dim, shape, window=WINDOW, pos_dim=8, heads=1):
        super().__init__(name)
        self.channels = channels
        self.pos = grid_embed(window, shape, pos_dim)
        self.attn = Attention(
            name, channels + 2 * pos_dim, dim_kv=token_dim, dim_attn=attn_dim, dim_out=channels, heads=heads
        )
        self.parts = (self.attn,)

    def inject(self, params, feat, tokens):
        """Returns ``(out, cache)``; empty tokens give ``out = feat`` exactly."""
        if tokens is None or len(tokens) == 0:
            return feat, None
        c, h, w = feat.shape
        queries = np.concatenate([feat.reshape(c, -1).T, self.pos], axis=1)
        y, cache = self.attn.attend(params, queries, tokens)
        return feat + y.T.reshape(c, h, w), cache

    def inject_backward(self, params, cache, dout):
        """Returns ``(dfeat, dtokens, grads)``."""
        if cache is None:
            return dout, None, {}
        c, h, w = dout.shape
        dq, dtokens, grads = self.attn.attend_backward(params, cache, dout.reshape(c, -1).T)
        return dout + dq[:, :c].T.reshape(c, h, w), dtokens, grads


@layer_registry
class ConditionEncoder(Layer):
    r"""
    Two-stage convolutional encoder of occupancy rasters with prior injection.

    ``conv3x3(1 -> C) + GELU``, injection, ``conv3x3(C -> C) + GroupNorm +
    GELU``, injection, ``conv1x1(C -> C)`` head.

    Parameters
    ----------
    name : str
        Parameter prefix.
    channels : int
        Output channels ``C``.
    shape : tuple of int
        Raster shape ``(H_r, W_r)``.
    window : tuple
        Perception window of the raster.
    token_dim : int
        Prior token size ``H``.
    groups : int
        Group-norm groups.
    heads : int
        Injection attention heads.
    zero_head : bool
        Initialize the head to zero.
    """

    def __init__(
        self, name="cond", channels=8, shape=(64, 32), window=WINDOW, token_dim=32, groups=2, heads=1, zero_head=False
    ):
        super().__init__(name)
        self.channels = channels
        self.shape = tuple(shape)
        self.window = window
        self.conv1 = Conv2d(f"{name}.conv1", 1, channels, 3)
        self.act1 = GELU()
        self.conv2 = Conv2d(f"{name}.conv2", channels, channels, 3)
        self.norm2 = GroupNorm(f"{name}.norm2", channels, groups)
        self.act2 = GELU()
        self.head = Conv2d(f"{name}.head", channels, channels, 1, init="zeros" if zero_head else "uniform")
        self.injectors = tuple(
            Injector(f"{name}.inject{i}", channels, token_dim, token_dim, self.shape, window, heads=heads)
            for i in (1, 2)
        )
        self.parts = (self.conv1, self.conv2, self.norm2, self.head, *self.injectors)

    def output_shape(self, input_shape):
        if tuple(input_shape) != self.shape:
            raise ValueError(f"{self} expects a raster of shape {self.shape}, got {tuple(input_shape)}.")
        return (self.channels, *self.shape)

    def forward(self, params, grid, tokens=None):
        self.output_shape(np.shape(grid))
        caches = []
        x = np.asarray(grid, dtype=float)[None]
        stages = [
            (self.conv1, self.act1, None, self.injectors[0]),
            (self.conv2, self.norm2, self.act2, self.injectors[1]),
        ]
        for layers in stages:
            *plain, injector = layers
            for layer in plain:
                if layer is not None:
                    x, c = layer.forward(params, x)
                    caches.append((layer, c))
            x, c = injector.inject(params, x, tokens)
            caches.append((injector, c))
        x, c = self.head.forward(params, x)
        caches.append((self.head, c))
        return x, caches

    def backward(self, params, cache, dy):
        """Returns ``(dgrid, dtokens, grads)``; ``dtokens`` is ``None`` without tokens."""
        grads = {}
        dtokens = None
        for layer, c in reversed(cache):
            if isinstance(layer, Injector):
                dy, dt, g = layer.inject_backward(params, c, dy)
                if dt is not None:
                    dtokens = dt if dtokens is None else dtokens + dt
            else:
                dy, g = layer.backward(params, c, dy)
            accumulate(grads, g)
        return dy[0], dtokens, grads


def encode_priors(g, params, encoder):
    """Prior tokens of the centerlines of ``g``."""
    return PriorTokens(encoder.forward(params, g)[0])


def condition_encode(raster, params, encoder):
    """Condition feature of a raster, no prior injected."""
    return BevGrid(encoder.forward(params, raster.grid)[0], raster.window)


def inject(bev, tokens, params, injector):
    """Inject prior tokens into a feature grid through one injection site."""
    return BevGrid(injector.inject(params, bev.features, tokens.tokens)[0], bev.window)

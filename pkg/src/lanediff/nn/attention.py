import numpy as np

from ..functions import softmax
from .dense import uniform_init
from .layer import Layer
from .layer import layer_registry


@layer_registry
class Attention(Layer):
    r"""
    Multi-head scaled dot-product attention.

    Queries come from ``x`` of shape ``(n, dim)``; keys and values come from
    ``context`` of shape ``(m, dim_kv)``, which is ``x`` itself when the layer
    is used as self-attention. The projections ``W_q``, ``W_k`` and ``W_v``
    have no bias, the output projection ``W_o`` has one.

    .. math::

        \mathrm{Attn}(x, c) = \mathrm{concat}_h\left(\mathrm{softmax}\left(
        \frac{x W_q^h (c W_k^h)^\top}{\sqrt{d_h}}\right) c W_v^h\right) W_o + b_o

    The layer returns only the attention output; residual connections are
    the caller's business.

    Parameters
    ----------
    name : str
        Parameter prefix.
    dim : int
        Query feature size.
    dim_kv : int, optional
        Context feature size, defaults to ``dim``.
    dim_attn : int, optional
        Total attention width over all heads, defaults to ``dim``.
    dim_out : int, optional
        Output feature size, defaults to ``dim``.
    heads : int
        Number of heads, must divide ``dim_attn``.
    zero_out : bool
        Initialize the output projection to zero.
    """

    def __init__(self, name, dim, dim_kv=None, dim_attn=None, dim_out=None, heads=1, zero_out=False):
        super().__init__(name)
        self.dim = dim
        self.dim_kv = dim if dim_kv is None else dim_kv
        self.dim_attn = dim if dim_attn is None else dim_attn
        self.dim_out = dim if dim_out is None else dim_out
        if heads < 1 or self.dim_attn % heads:
            raise ValueError(f"{heads} heads do not divide the attention width {self.dim_attn}.")
        self.heads = heads
        self.zero_out = zero_out

    def param_shapes(self):
        a = self.dim_attn
        return {
            self.key("Wq"): (self.dim, a),
            self.key("Wk"): (self.dim_kv, a),
            self.key("Wv"): (self.dim_kv, a),
            self.key("Wo"): (a, self.dim_out),
            self.key("bo"): (self.dim_out,),
        }

    def init_params(self, rng):
        a = self.dim_attn
        wo = np.zeros((a, self.dim_out)) if self.zero_out else uniform_init(rng, (a, self.dim_out), a)
        return {
            self.key("Wq"): uniform_init(rng, (self.dim, a), self.dim),
            self.key("Wk"): uniform_init(rng, (self.dim_kv, a), self.dim_kv),
            self.key("Wv"): uniform_init(rng, (self.dim_kv, a), self.dim_kv),
            self.key("Wo"): wo,
            self.key("bo"): np.zeros(self.dim_out),
        }

    def output_shape(self, input_shape):
        if len(input_shape) != 2 or input_shape[1] != self.dim:
            raise ValueError(f"{self} expects (n, {self.dim}) queries, got {tuple(input_shape)}.")
        return (input_shape[0], self.dim_out)

    def _split(self, z):
        n = z.shape[0]
        return z.reshape(n, self.heads, -1).transpose(1, 0, 2)

    def _merge(self, z):
        return z.transpose(1, 0, 2).reshape(z.shape[1], -1)

    def attend(self, params, x, context):
        """Cross-attention forward pass, returns ``(y, cache)``."""
        self.output_shape(x.shape)
        if context.ndim != 2 or context.shape[1] != self.dim_kv:
            raise ValueError(f"{self} expects (m, {self.dim_kv}) context, got {context.shape}.")
        if context.shape[0] == 0:
            raise ValueError(f"{self} cannot attend to an empty context.")
        q = self._split(x @ self.p(params, "Wq"))
        k = self._split(context @ self.p(params, "Wk"))
        v = self._split(context @ self.p(params, "Wv"))
        scale = 1.0 / np.sqrt(q.shape[-1])
        a = softmax(np.einsum("hnd,hmd->hnm", q, k) * scale, axis=-1)
        o = self._merge(np.einsum("hnm,hmd->hnd", a, v))
        y = o @ self.p(params, "Wo") + self.p(params, "bo")
        return y, (x, context, q, k, v, a, o, scale)

    def attend_backward(self, params, cache, dy):
        """Cross-attention backward pass, returns ``(dx, dcontext, grads)``."""
        x, context, q, k, v, a, o, scale = cache
        grads = {self.key("Wo"): o.T @ dy, self.key("bo"): dy.sum(axis=0)}
        do = self._split(dy @ self.p(params, "Wo").T)
        da = np.einsum("hnd,hmd->hnm", do, v)
        dv = np.einsum("hnm,hnd->hmd", a, do)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = self._merge(np.einsum("hnm,hmd->hnd", ds, k))
        dk = self._merge(np.einsum("hnm,hnd->hmd", ds, q))
        dv = self._merge(dv)
        grads[self.key("Wq")] = x.T @ dq
        grads[self.key("Wk")] = context.T @ dk
        grads[self.key("Wv")] = context.T @ dv
        dx = dq @ self.p(params, "Wq").T
        dcontext = dk @ self.p(params, "Wk").T + dv @ self.p(params, "Wv").T
        return dx, dcontext, grads

    def forward(self, params, x):
        if self.dim_kv != self.dim:
            raise ValueError(f"{self} is a cross-attention layer, use attend().")
        return self.attend(params, x, x)

    def backward(self, params, cache, dy):
        dx, dcontext, grads = self.attend_backward(params, cache, dy)
        return dx + dcontext, grads

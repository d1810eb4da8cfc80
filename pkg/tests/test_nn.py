"""
Tests of the layer library: analytic gradients against finite differences,
shape contracts, the parameter store and the optimizer.
"""

import numpy as np
import pytest

from lanediff.errors import NumericalError
from lanediff.nn import GELU
from lanediff.nn import Attention
from lanediff.nn import AvgPool2
from lanediff.nn import Conv2d
from lanediff.nn import Dense
from lanediff.nn import GroupNorm
from lanediff.nn import Layer
from lanediff.nn import ParamStore
from lanediff.nn import Residual
from lanediff.nn import Sequential
from lanediff.nn import Sigmoid
from lanediff.nn import Upsample2
from lanediff.nn import accumulate
from lanediff.nn import adamw_step
from lanediff.nn import backward
from lanediff.nn import build_layer
from lanediff.nn import check_layer
from lanediff.nn import cosine_lr
from lanediff.nn import forward
from lanediff.nn import grid_embed
from lanediff.nn import layer_registry
from lanediff.nn import sinusoidal_embed

TOLERANCE = 1e-4


def _check(layer, shape, rng):
    params = layer.init_params(rng)
    # move zero-initialized biases away from zero so they are exercised
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    x = rng.standard_normal(shape)
    return check_layer(layer, params, x, samples=30, h=1e-5, rng=rng)


@pytest.mark.parametrize(
    "layer, shape",
    [
        (Dense("d", 5, 3), (4, 5)),
        (Dense("d", 5, 3, bias=False), (2, 4, 5)),
        (Conv2d("c", 3, 4, k=1), (3, 4, 6)),
        (Conv2d("c", 3, 4, k=3), (3, 4, 6)),
        (GroupNorm("n", 4, groups=2), (4, 3, 5)),
        (GELU(), (3, 7)),
        (Sigmoid(), (3, 7)),
        (AvgPool2("pool"), (2, 4, 6)),
        (Upsample2("up"), (2, 3, 2)),
        (Attention("a", 6, heads=2), (5, 6)),
    ],
)
def test_layer_gradients(layer, shape, rng):
    assert _check(layer, shape, rng) < TOLERANCE


def test_cross_attention_gradients(rng):
    layer = Attention("x", 4, dim_kv=6, dim_attn=8, dim_out=3, heads=2)
    params = layer.init_params(rng)
    x = rng.standard_normal((3, 4))
    context = rng.standard_normal((5, 6))
    y, cache = layer.attend(params, x, context)
    assert y.shape == (3, 3)
    dy = rng.standard_normal(y.shape)
    dx, dcontext, grads = layer.attend_backward(params, cache, dy)
    assert dx.shape == x.shape
    assert dcontext.shape == context.shape

    h = 1e-5
    for arr, analytic in ((x, dx), (context, dcontext), (params["x.Wk"], grads["x.Wk"])):
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        plus = np.sum(dy * layer.attend(params, x, context)[0])
        arr[idx] = old - h
        minus = np.sum(dy * layer.attend(params, x, context)[0])
        arr[idx] = old
        assert analytic[idx] == pytest.approx((plus - minus) / (2 * h), rel=1e-5, abs=1e-8)


def test_attention_rejects_bad_context(rng):
    layer = Attention("x", 4, dim_kv=6)
    params = layer.init_params(rng)
    with pytest.raises(ValueError, match="empty context"):
        layer.attend(params, np.zeros((2, 4)), np.zeros((0, 6)))
    with pytest.raises(ValueError, match="use attend"):
        layer.forward(params, np.zeros((2, 4)))
    with pytest.raises(ValueError, match="heads do not divide"):
        Attention("y", 6, heads=4)


def test_sequential_with_residual_gradients(rng):
    block = Sequential(
        "block",
        [
            Conv2d("block.c1", 4, 4, k=3),
            GroupNorm("block.n1", 4, groups=2),
            GELU(),
            Conv2d("block.c2", 4, 4, k=1),
        ],
    )
    net = Sequential("net", [Conv2d("net.in", 2, 4, k=1), Residual("net.res", block)], input_shape=(2, 4, 4))
    assert net.output_shape((2, 4, 4)) == (4, 4, 4)
    assert _check(net, (2, 4, 4), rng) < TOLERANCE


def test_sequential_rejects_shape_mismatch_and_duplicate_params():
    with pytest.raises(ValueError, match="expects 4 input features"):
        Sequential("s", [Dense("a", 3, 5), Dense("b", 4, 2)], input_shape=(1, 3))
    with pytest.raises(ValueError, match="owned by both"):
        Sequential("s", [Dense("a", 3, 3), Dense("a", 3, 3)])
    with pytest.raises(ValueError, match="maps"):
        Residual("r", Dense("a", 3, 5)).output_shape((2, 3))


def test_module_forward_and_backward(rng):
    layer = Dense("d", 3, 2)
    params = layer.init_params(rng)
    x = rng.standard_normal((4, 3))
    y = forward(layer, params, x)
    np.testing.assert_allclose(y, x @ params["d.W"] + params["d.b"])
    dx, grads = backward(layer, params, x, np.ones_like(y))
    np.testing.assert_allclose(grads["d.b"], [4.0, 4.0])
    np.testing.assert_allclose(dx, np.ones((4, 2)) @ params["d.W"].T)
    with pytest.raises(ValueError, match="does not match output shape"):
        backward(layer, params, x, np.ones((4, 3)))


def test_identity_and_zero_initializations(rng):
    x = rng.standard_normal((3, 4, 4))
    conv = Conv2d("c", 3, 3, k=1, init="identity")
    np.testing.assert_allclose(conv(conv.init_params(rng), x), x)
    dense = Dense("d", 4, 4, init="zeros")
    assert not dense(dense.init_params(rng), x).any()
    with pytest.raises(ValueError, match="Identity initialization"):
        Conv2d("c", 3, 4, k=1, init="identity")
    with pytest.raises(ValueError, match="Only 1x1 and 3x3"):
        Conv2d("c", 3, 4, k=5)


def test_layer_registry_and_base_class():
    assert {"Dense", "Conv2d", "GroupNorm", "Attention", "Sequential", "Residual"} <= set(layer_registry.items)
    with pytest.raises(NotImplementedError):
        Layer("base").forward({}, np.zeros(1))
    assert Layer("base").key("W") == "base.W"


def test_build_layer_resolves_registered_types():
    dense = build_layer("Dense", name="d", n_in=3, n_out=2)
    assert isinstance(dense, Dense)
    assert dense.key("W") == "d.W"
    with pytest.raises(ValueError, match="Layer type 'Linear' is not registered"):
        build_layer("Linear", name="d")


def test_param_store_bookkeeping():
    store = ParamStore({"a.W": np.ones((2, 2)), "b.W": np.zeros(3)})
    assert store.count() == 7
    assert store.count("a.") == 4
    assert store.names(("a.", "b.")) == ["a.W", "b.W"]
    with pytest.raises(ValueError, match="already exists"):
        store.add("a.W", np.ones(1))
    with pytest.raises(KeyError):
        store.set("c.W", np.ones(1))
    with pytest.raises(ValueError, match="does not match"):
        store.set("a.W", np.ones(3))
    other = store.copy()
    other.set("a.W", np.full((2, 2), 5.0))
    assert store["a.W"][0, 0] == 1.0
    store.drop("b.")
    assert "b.W" not in store
    assert len(store) == 1


def test_param_store_rounds_to_float32():
    store = ParamStore({"w": np.array([1.0 + 1e-12, 0.1])})
    store.round_float32()
    np.testing.assert_array_equal(store["w"], np.array([1.0, 0.1], dtype=np.float32).astype(float))
    assert store["w"].dtype == np.float64


def test_accumulate():
    total = accumulate({}, {"w": np.ones(2)}, scale=0.5)
    accumulate(total, {"w": np.ones(2), "b": np.ones(1)})
    np.testing.assert_allclose(total["w"], [1.5, 1.5])
    np.testing.assert_allclose(total["b"], [1.0])


def test_adamw_first_step_moves_by_learning_rate():
    store = ParamStore({"w": np.array([1.0, -2.0])})
    adamw_step(store, {"w": np.array([0.5, -3.0])}, lr=0.1)
    np.testing.assert_allclose(store["w"], [0.9, -1.9], rtol=1e-6)
    assert store.steps["w"] == 1


def test_adamw_decoupled_weight_decay():
    store = ParamStore({"w": np.array([2.0])})
    adamw_step(store, {"w": np.array([0.0])}, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(store["w"], [1.9])


def test_adamw_rejects_non_finite_gradient_without_changes():
    store = ParamStore({"w": np.array([1.0, 2.0]), "b": np.array([0.0])})
    with pytest.raises(NumericalError, match="'w'"):
        adamw_step(store, {"b": np.array([1.0]), "w": np.array([np.nan, 0.0])}, lr=0.1)
    np.testing.assert_array_equal(store["b"], [0.0])
    assert store.steps["b"] == 0
    with pytest.raises(ValueError, match="unknown parameter"):
        adamw_step(store, {"c": np.array([1.0])}, lr=0.1)


def test_cosine_lr():
    assert cosine_lr(0, 10, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(5, 10, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(10, 10, 1e-3) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(0, 0, 1e-3) == 1e-3
    with pytest.raises(ValueError, match="outside"):
        cosine_lr(11, 10, 1e-3)


def test_sinusoidal_embedding():
    e = sinusoidal_embed(np.array([0.0, 1.0]), 4)
    assert e.shape == (2, 4)
    np.testing.assert_allclose(e[0], [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(e[1, :2], [np.sin(1.0), np.cos(1.0)])
    np.testing.assert_allclose(e[1, 2:], [np.sin(0.01), np.cos(0.01)])
    with pytest.raises(ValueError, match="even"):
        sinusoidal_embed(1.0, 3)


def test_grid_embedding_cell_centers():
    e = grid_embed(((0.0, 4.0), (0.0, 2.0)), (2, 4), 2)
    assert e.shape == (8, 4)
    # first cell center is (0.5, 0.5), the last one (3.5, 1.5)
    np.testing.assert_allclose(e[0], [np.sin(0.5), np.cos(0.5), np.sin(0.5), np.cos(0.5)])
    np.testing.assert_allclose(e[-1], [np.sin(3.5), np.cos(3.5), np.sin(1.5), np.cos(1.5)])

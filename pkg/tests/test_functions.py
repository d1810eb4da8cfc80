"""
Tests of the elementwise helpers in lanediff.functions.
"""

import numpy as np
import pytest

from lanediff.functions import bce_with_logits
from lanediff.functions import focal_loss
from lanediff.functions import relative_error
from lanediff.functions import sigmoid
from lanediff.functions import softmax


def test_sigmoid_is_stable_for_large_logits():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_softmax_rows_sum_to_one():
    x = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])
    out = softmax(x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    np.testing.assert_allclose(out[1], 1.0 / 3.0)


def test_bce_with_logits_matches_closed_form():
    z = np.array([-3.0, -0.2, 0.0, 1.5])
    y = np.array([0.0, 1.0, 1.0, 0.0])
    loss, grad = bce_with_logits(z, y)
    p = 1.0 / (1.0 + np.exp(-z))
    np.testing.assert_allclose(loss, -(y * np.log(p) + (1 - y) * np.log(1 - p)))
    np.testing.assert_allclose(grad, p - y)


@pytest.mark.parametrize("target", [0.0, 1.0])
def test_focal_loss_gradient_matches_central_differences(target):
    p = np.linspace(0.05, 0.95, 19)
    y = np.full_like(p, target)
    h = 1e-6
    _, grad = focal_loss(p, y)
    numeric = (focal_loss(p + h, y)[0] - focal_loss(p - h, y)[0]) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-8)


def test_focal_loss_is_small_for_confident_correct_predictions():
    loss, _ = focal_loss(np.array([0.99, 0.01]), np.array([1.0, 0.0]))
    assert np.all(loss < 1e-5)
    assert np.all(np.isfinite(focal_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))[0]))


def test_relative_error_uses_floor():
    assert relative_error(0.0, 1e-9, floor=1e-5) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)

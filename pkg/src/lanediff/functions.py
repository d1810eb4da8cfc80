"""Scalar and elementwise helpers shared by the losses and heads."""

import numpy as np


def sigmoid(x):
    """
    Numerically stable logistic function.

    Parameters
    ----------
    x : array_like
        Logits.

    Returns
    -------
    numpy.ndarray
        :math:`1 / (1 + e^{-x})` evaluated without overflow.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    """Row-wise softmax with max subtraction."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def bce_with_logits(logits, targets):
    r"""
    Binary cross-entropy on logits and its gradient.

    Parameters
    ----------
    logits : numpy.ndarray
        Raw scores.
    targets : numpy.ndarray
        Targets in :math:`\{0, 1\}`, same shape as ``logits``.

    Returns
    -------
    tuple of numpy.ndarray
        Elementwise loss and elementwise derivative with respect to the logits.

    Notes
    -----
    .. math::

        \ell = \max(z, 0) - z y + \log(1 + e^{-|z|}), \qquad
        \frac{\partial \ell}{\partial z} = \sigma(z) - y
    """
    z = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - y


def focal_loss(probs, targets, gamma=2.0, alpha=0.25, eps=1e-12):
    r"""
    Binary focal loss on probabilities and its gradient.

    Parameters
    ----------
    probs : numpy.ndarray
        Predicted probabilities in :math:`[0, 1]`.
    targets : numpy.ndarray
        Binary targets.
    gamma : float
        Focusing exponent.
    alpha : float
        Weight of the positive class.
    eps : float
        Clipping applied inside the logarithms.

    Returns
    -------
    tuple of numpy.ndarray
        Elementwise loss and derivative with respect to ``probs``.

    Notes
    -----
    .. math::

        \ell = \begin{cases}
        -\alpha (1-p)^\gamma \log p & y = 1\\
        -(1-\alpha) p^\gamma \log (1-p) & y = 0
        \end{cases}
    """
    p = np.asarray(probs, dtype=float)
    y = np.asarray(targets, dtype=float)
    pc = np.clip(p, eps, 1.0 - eps)
    log_p = np.log(np.clip(p, eps, 1.0))
    log_q = np.log(np.clip(1.0 - p, eps, 1.0))

    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_q
    loss = y * pos + (1.0 - y) * neg

    # d/dp of both branches, the log terms use the clipped probability
    d_pos = alpha * gamma * (1.0 - p) ** (gamma - 1.0) * log_p - alpha * (1.0 - p) ** gamma / pc
    d_neg = -(1.0 - alpha) * gamma * p ** (gamma - 1.0) * log_q + (1.0 - alpha) * p**gamma / (1.0 - pc)
    grad = y * d_pos + (1.0 - y) * d_neg
    return loss, grad


def relative_error(analytic, numeric, floor=1e-5):
    """Symmetric relative error used by the gradient checker."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)

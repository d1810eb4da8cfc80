import numpy as np

from ..errors import NumericalError


def adamw_step(store, grads, lr, beta1=0.9, beta2=0.999, weight_decay=0.0, eps=1e-8):
    r"""
    Apply one AdamW update to every parameter that has a gradient.

    Weight decay is decoupled from the adaptive step:

    .. math::

        w \leftarrow w - \mathrm{lr}\,\lambda\, w - \mathrm{lr}
        \frac{\hat{m}}{\sqrt{\hat{v}} + \epsilon}

    Parameters
    ----------
    store : lanediff.nn.ParamStore
        Parameters and optimizer state, updated in place.
    grads : dict
        Gradients by parameter name.
    lr : float
        Learning rate.
    beta1, beta2 : float
        Moment decay rates.
    weight_decay : float
        Decoupled decay coefficient :math:`\lambda`.
    eps : float
        Denominator offset.

    Returns
    -------
    lanediff.nn.ParamStore
        The updated store.

    Raises
    ------
    NumericalError
        If a gradient holds a non-finite value; no parameter is changed then.
    ValueError
        If a gradient shape or name does not match the store.
    """
    for name, g in grads.items():
        if name not in store:
            raise ValueError(f"Gradient for unknown parameter '{name}'.")
        if np.shape(g) != store[name].shape:
            raise ValueError(f"Gradient shape {np.shape(g)} does not match parameter '{name}' {store[name].shape}.")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"Non-finite gradient for parameter '{name}'.")

    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=float)
        step = store.steps[name] + 1
        w = store.params[name] * (1.0 - lr * weight_decay)
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g**2
        m_hat = store.m[name] / (1.0 - beta1**step)
        v_hat = store.v[name] / (1.0 - beta2**step)
        store.params[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        store.steps[name] = step
    return store


def cosine_lr(step, total, lr0):
    r"""
    Cosine annealing, :math:`\mathrm{lr}_0 \cdot \frac{1}{2}(1 + \cos(\pi s / S))`.

    Raises
    ------
    ValueError
        If ``step`` lies outside ``[0, total]``.
    """
    if not 0 <= step <= total:
        raise ValueError(f"Step {step} outside [0, {total}].")
    if total == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total))

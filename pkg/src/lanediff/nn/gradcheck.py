"""Central finite-difference checks of analytic gradients."""

import numpy as np

from ..functions import relative_error


def gradcheck(loss_fn, arrays, grads, samples=10, h=1e-3, rng=None):
    r"""
    Compare analytic gradients with central differences at random entries.

    Parameters
    ----------
    loss_fn : callable
        Returns the scalar loss; must read ``arrays`` at call time.
    arrays : dict
        Arrays to perturb by name. Entries are perturbed in place and restored.
    grads : dict
        Analytic gradients by name; a missing name means a zero gradient.
    samples : int
        Number of random entries to check.
    h : float
        Finite-difference step.
    rng : numpy.random.Generator, optional
        Source of the checked positions.

    Returns
    -------
    float
        Largest relative error over all checked entries.

    Notes
    -----
    The relative error of an entry is measured against a floor of
    :math:`10^{-3}` times the largest analytic gradient magnitude of the same
    array, so entries with vanishing gradients do not turn the truncation
    error :math:`O(h^2)` into a spurious failure.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = sorted(n for n in arrays if np.size(arrays[n]))
    worst = 0.0
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        arr = arrays[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        f_plus = loss_fn()
        arr[idx] = old - h
        f_minus = loss_fn()
        arr[idx] = old
        numeric = (f_plus - f_minus) / (2.0 * h)
        g = grads.get(name)
        analytic = 0.0 if g is None else float(g[idx])
        scale = 0.0 if g is None else float(np.max(np.abs(g)))
        worst = max(worst, relative_error(analytic, numeric, floor=max(1e-8, 1e-3 * scale)))
    return worst


def check_layer(layer, params, x, samples=10, h=1e-3, rng=None):
    """
    Finite-difference check of a layer's ``backward`` on a random linear loss.

    The scalar loss is ``sum(R * layer(x))`` for a fixed random ``R``. Both the
    input and every parameter are checked.

    Returns
    -------
    float
        Largest relative error over all checked entries.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    x = np.array(x, dtype=float)
    y, cache = layer.forward(params, x)
    projection = rng.standard_normal(y.shape)
    dx, grads = layer.backward(params, cache, projection)

    arrays = dict(params)
    arrays["__input__"] = x
    grads = dict(grads)
    grads["__input__"] = dx

    def loss():
        return float(np.sum(projection * layer.forward(params, x)[0]))

    return gradcheck(loss, arrays, grads, samples=samples, h=h, rng=rng)

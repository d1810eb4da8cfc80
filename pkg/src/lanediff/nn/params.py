import logging

import numpy as np


class ParamStore:
    r"""
    Named parameter arrays with their AdamW state.

    Parameters are held in float64 for computation. :meth:`round_float32`
    rounds them to float32 precision, which is what checkpoints store.

    Attributes
    ----------
    params : dict
        Parameter arrays by unique name.
    m : dict
        First moment estimates, same shapes as the parameters.
    v : dict
        Second moment estimates, same shapes as the parameters.
    steps : dict
        Number of optimizer updates applied to each parameter.
    """

    def __init__(self, params=None):
        self.params = {}
        self.m = {}
        self.v = {}
        self.steps = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise ValueError(f"Parameter '{name}' already exists.")
        arr = np.array(value, dtype=float)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self.steps[name] = 0

    def update(self, params):
        for name, value in params.items():
            self.add(name, value)
        return self

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix=""):
        return sorted(n for n in self.params if n.startswith(prefix))

    def count(self, prefix=""):
        """Number of scalar parameters whose name starts with ``prefix``."""
        return int(sum(self.params[n].size for n in self.names(prefix)))

    def subset(self, prefix):
        return {n: self.params[n] for n in self.names(prefix)}

    def set(self, name, value):
        if name not in self.params:
            raise KeyError(f"Unknown parameter '{name}'.")
        value = np.asarray(value, dtype=float)
        if value.shape != self.params[name].shape:
            raise ValueError(f"Shape {value.shape} does not match parameter '{name}' {self.params[name].shape}.")
        self.params[name] = value.copy()

    def drop(self, prefix):
        """Remove every parameter under ``prefix`` together with its state."""
        names = self.names(prefix)
        for n in names:
            for d in (self.params, self.m, self.v, self.steps):
                del d[n]
        logging.debug(f"Dropped {len(names)} parameters under '{prefix}'.")

    def reset_state(self, prefix=""):
        for n in self.names(prefix):
            self.m[n] = np.zeros_like(self.params[n])
            self.v[n] = np.zeros_like(self.params[n])
            self.steps[n] = 0

    def round_float32(self):
        for n in self.params:
            self.params[n] = self.params[n].astype(np.float32).astype(float)
        return self

    def copy(self):
        other = ParamStore()
        for n in self.params:
            other.params[n] = self.params[n].copy()
            other.m[n] = self.m[n].copy()
            other.v[n] = self.v[n].copy()
            other.steps[n] = self.steps[n]
        return other

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params.values())


def accumulate(total, grads, scale=1.0):
    """Add ``scale * grads`` into the gradient dict ``total`` in place."""
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + scale * g
        else:
            total[name] = scale * np.asarray(g, dtype=float)
    return total

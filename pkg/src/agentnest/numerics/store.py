"""Named parameter storage with stable iteration order.

``params`` holds trainable tensors; ``state`` holds non-trainable float64
arrays (optimizer moments, running noise statistics, step counters).  Both
are insertion-ordered dicts, which makes checkpoints byte-reproducible.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParameterStore:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}

    def param(self, name, values):
        """Register a new trainable parameter; names must be unique."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values, dtype=np.float64).copy(), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self, names=None):
        for name in (names if names is not None else self.params):
            self.params[name].grad = None

    def grad_norm(self, names=None):
        total = 0.0
        for name in (names if names is not None else self.params):
            g = self.params[name].grad
            if g is not None:
                total += float((g * g).sum())
        return float(np.sqrt(total))

    def state_array(self, name, shape=()):
        """Fetch-or-create a float64 state array."""
        if name not in self.state:
            self.state[name] = np.zeros(shape, dtype=np.float64)
        return self.state[name]

    def snapshot(self, names=None):
        """Byte-level copies of parameter values, for freeze-contract checks."""
        return {name: self.params[name].data.copy()
                for name in (names if names is not None else self.params)}

    def check_finite(self):
        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"non-finite values in parameter {name!r}")

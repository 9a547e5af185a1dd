"""Adam with bias correction over a ParameterStore.

Moments and the step counter live in ``store.state`` so checkpoints capture
optimizer state.  Separate optimizer groups (main training vs adversarial
phase) keep independent counters and cover disjoint parameter subsets.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, store, names=None, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, group="main"):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.store = store
        self.names = list(names) if names is not None else store.names()
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.group = group
        self._t = store.state_array(f"adam/{group}/t")
        for name in self.names:
            shape = store[name].data.shape
            store.state_array(f"adam/{group}/{name}/m", shape)
            store.state_array(f"adam/{group}/{name}/v", shape)

    def step(self):
        """One update over the group's parameters; gradients are then zeroed."""
        self._t += 1.0
        t = float(self._t)
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in self.names:
            p = self.store[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.store.state[f"adam/{self.group}/{name}/m"]
            v = self.store.state[f"adam/{self.group}/{name}/v"]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

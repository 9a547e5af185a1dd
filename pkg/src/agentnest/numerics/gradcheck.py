"""Central finite-difference gradient oracle.

``grad_check`` replays a deterministic scalar-producing closure under
coordinate perturbations and compares the analytic tape gradient against the
central difference.  The closure must freeze all sampling (corruption plans,
noise draws) so repeated evaluations see identical randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict = field(default_factory=dict)
    checked_params: int = 0
    checked_coords: int = 0

    def ok(self, tol=1e-4):
        return self.max_rel_error <= tol


def grad_check(f, store, h=1e-5, max_coords_per_param=4, rng=None, param_names=None):
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    Only parameters reached by the loss (non-None grad) are sampled unless
    ``param_names`` pins the set explicitly.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    store.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check target must be scalar")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in grad_check")
    loss.backward()

    if param_names is None:
        param_names = [n for n, p in store.params.items() if p.grad is not None]
    analytic = {}
    for name in param_names:
        g = store[name].grad
        analytic[name] = (np.zeros_like(store[name].data) if g is None else g.copy())
    store.zero_grad()

    report = GradCheckReport(0.0, "", {}, 0, 0)
    for name in param_names:
        p = store[name]
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                up = float(f().data)
            flat[c] = orig - h
            with no_grad():
                down = float(f().data)
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {name!r}")
            a = analytic[name].reshape(-1)[c]
            rel = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, rel)
            report.checked_coords += 1
        report.per_param[name] = worst
        report.checked_params += 1
        if worst > report.max_rel_error:
            report.max_rel_error = worst
            report.worst_param = name
    return report

"""Central finite-difference gradient checks.

The harness works on any scalar function of a flat vector, so the same code
checks every model's ``loss_grad``, the graph regularizer and the
second-order meta-gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParamSchema

DEFAULT_STEP = 1e-6


def numeric_grad(f, theta, step=DEFAULT_STEP):
    """Central differences with per-coordinate step ``step * (1 + |theta_j|)``."""
    theta = np.array(theta, dtype=np.float64, copy=True).reshape(-1)
    g = np.empty_like(theta)
    for j in range(theta.size):
        h = step * (1.0 + abs(theta[j]))
        orig = theta[j]
        theta[j] = orig + h
        fp = f(theta)
        theta[j] = orig - h
        fm = f(theta)
        theta[j] = orig
        g[j] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric, floor=1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` taken over the whole vector."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class GradCheckResult:
    errors: dict
    tol: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tol

    def worst_block(self):
        return max(self.errors, key=self.errors.get) if self.errors else None


def check_gradient(f, grad, theta, schema: ParamSchema | None = None, step=DEFAULT_STEP, tol=1e-4,
                   floor=1e-6) -> GradCheckResult:
    """Compare ``grad(theta)`` against central differences of ``f``, block by block.

    Without a schema the whole vector is one block named ``"theta"``.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    a = np.asarray(grad(theta), dtype=np.float64).reshape(-1)
    n = numeric_grad(f, theta, step)
    if schema is None:
        return GradCheckResult({"theta": relative_error(a, n, floor)}, tol)
    errors = {name: relative_error(a[sl], n[sl], floor) for name, sl in schema.slices.items()}
    return GradCheckResult(errors, tol)


def check_model(model, x, t, y, theta, **kw) -> GradCheckResult:
    """Gradient check of one sample's ``loss_grad`` for any model."""
    return check_gradient(lambda th: model.loss(x, t, y, th),
                          lambda th: model.loss_grad(x, t, y, th),
                          theta, model.schema, **kw)

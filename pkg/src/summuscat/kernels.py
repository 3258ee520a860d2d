"""Backend selection for the batched MUSCAT kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback. ``SUMMUSCAT_BACKEND=python`` forces the fallback and
``SUMMUSCAT_BACKEND=compiled`` makes a missing extension an import error.
"""
import os
from types import SimpleNamespace

import numpy as np

from . import _kernels_py
from ._kernels_py import layout

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_requested = os.environ.get("SUMMUSCAT_BACKEND", "").strip().lower()
if _requested == "compiled" and _compiled is None:
    raise ImportError("SUMMUSCAT_BACKEND=compiled but summuscat._kernels is not built")

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

if _requested == "python" or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def get_backend(name=None):
    """Kernel namespace for ``name`` (defaults to the active backend)."""
    impl = BACKENDS[name or BACKEND]

    def predict(x, t, theta, K, n_times):
        return impl.muscat_predict(_f(x, 3), _i(t), _f(theta, 2), K, n_times)

    def loss_grad(x, t, y, theta, K, n_times, lambda_cp, beta_simplex):
        return impl.muscat_loss_grad(_f(x, 3), _i(t), _f(y, 1), _f(theta, 2), K, n_times,
                                     float(lambda_cp), float(beta_simplex))

    return SimpleNamespace(name=name or BACKEND, predict=predict, loss_grad=loss_grad)


def _f(a, ndim):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {a.shape}")
    return a


def _i(a):
    return np.ascontiguousarray(a, dtype=np.int64).reshape(-1)


active = get_backend()

__all__ = ["BACKEND", "BACKENDS", "active", "get_backend", "layout"]

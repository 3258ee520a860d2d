"""Differentiable model interface consumed by the trainer.

A model maps a predictor sample ``x`` observed at time index ``t`` to a
scalar response under a flat parameter vector ``theta`` laid out by
``schema``. The trainer only calls the batched methods; the defaults here
loop over rows so a new model only has to supply the per-sample trio.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ParameterError
from .tensor import ParamSchema


class Model:
    name = "model"
    schema: ParamSchema

    @property
    def size(self):
        return self.schema.size

    def init_params(self, rng) -> np.ndarray:
        """Independent N(0, 0.1^2) draws for every coordinate."""
        return rng.normal(0.0, 0.1, size=self.size)

    def predict(self, x, t, theta) -> float:
        raise NotImplementedError

    def loss(self, x, t, y, theta) -> float:
        raise NotImplementedError

    def loss_grad(self, x, t, y, theta) -> np.ndarray:
        raise NotImplementedError

    def batch_predict(self, xs, ts, thetas):
        return np.array([self.predict(x, int(t), th) for x, t, th in zip(xs, ts, thetas)], dtype=np.float64)

    def batch_loss_grad(self, xs, ts, ys, thetas):
        losses = np.empty(len(ts))
        grads = np.empty((len(ts), self.size))
        for i, (x, t, y, th) in enumerate(zip(xs, ts, ys, thetas)):
            losses[i] = self.loss(x, int(t), float(y), th)
            grads[i] = self.loss_grad(x, int(t), float(y), th)
        return losses, grads

    # Models with an analytic Hessian-vector product override this with a
    # callable ``batch_hvp(xs, ts, ys, thetas, vs) -> (B, P)``.
    batch_hvp = None


def check_finite(grad, schema: ParamSchema, component="trainer"):
    """Raise :class:`NumericError` naming the first block with a non-finite entry."""
    grad = np.asarray(grad)
    bad = ~np.isfinite(grad)
    if bad.any():
        idx = int(np.argwhere(bad.reshape(-1, grad.shape[-1]))[0][1])
        block = schema.block_of(idx)
        raise NumericError(f"non-finite gradient in block {block!r}", block=block, component=component)


class LinearModel(Model):
    """``f(x; theta) = theta . vec(x)`` with squared loss ``(f - y)^2``.

    With ``dim=1`` this is the scalar test model used throughout the trainer
    checks; registered as ``"linear-baseline"`` it regresses the response on
    all flattened predictor scales.
    """

    name = "linear-baseline"

    def __init__(self, dim: int):
        if dim < 1:
            raise ParameterError("dim must be positive", component="models")
        self.dim = int(dim)
        self.schema = ParamSchema([("w", (self.dim,))])

    def _flat(self, xs):
        return np.asarray(xs, dtype=np.float64).reshape(len(xs), self.dim)

    def predict(self, x, t, theta):
        return float(np.asarray(x, dtype=np.float64).reshape(-1) @ np.asarray(theta))

    def loss(self, x, t, y, theta):
        e = self.predict(x, t, theta) - y
        return e * e

    def loss_grad(self, x, t, y, theta):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return 2.0 * (x @ theta - y) * x

    def batch_predict(self, xs, ts, thetas):
        return np.einsum("bd,bd->b", self._flat(xs), thetas)

    def batch_loss_grad(self, xs, ts, ys, thetas):
        X = self._flat(xs)
        e = np.einsum("bd,bd->b", X, thetas) - ys
        return e * e, 2.0 * e[:, None] * X

    def batch_hvp(self, xs, ts, ys, thetas, vs):
        X = self._flat(xs)
        return 2.0 * np.einsum("bd,bd->b", X, vs)[:, None] * X


MODEL_NAMES = ("sum-muscat", "sum-muscat-temporal", "linear-baseline")


def make_model(name: str, *, N: int, L: int, K: int = 2, n_times: int | None = None,
               lambda_cp: float = 0.01, beta_simplex: float = 1.0) -> Model:
    """Instantiate a registered model by name."""
    from .muscat import MuscatModel

    if name == "sum-muscat":
        return MuscatModel(N=N, L=L, K=K, lambda_cp=lambda_cp, beta_simplex=beta_simplex)
    if name == "sum-muscat-temporal":
        if not n_times:
            raise ParameterError("sum-muscat-temporal needs the number of time steps", component="models")
        return MuscatModel(N=N, L=L, K=K, mode="temporal", n_times=n_times,
                           lambda_cp=lambda_cp, beta_simplex=beta_simplex)
    if name == "linear-baseline":
        return LinearModel(N * L)
    raise ParameterError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}", component="models")

"""Multi-scale CP-factor prediction model trained under the two-step scheme.

Prediction for one task at one time, with scale weights ``k_l**2``::

    y_hat = sum_l k_l**2 * x_l . (W_l a + V_l b)

where ``W_l`` and ``V_l`` are ``(N, K)`` matrices whose columns are the
spatial and temporal model weights of each latent factor. In the temporal
variant ``b`` is replaced by row ``t`` of a ``(T, K)`` factor matrix. The
per-sample loss adds a CP-fit term against the degenerate reconstruction and
a soft simplex penalty on the squared scale weights::

    0.5 (y_hat - y)**2 + lambda_cp/2 sum_l |x_l - C_l (a * b)|**2
        + beta_simplex (1 - sum_l k_l**2)**2
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NumericError, ParameterError, ShapeError
from .models import Model
from .tensor import FULL_DEGENERATE, MODES, TEMPORAL_RETAINED, DegenerateCPFactors, ParamSchema

_COMPONENT = "muscat"


@dataclass(frozen=True)
class MuscatHyper:
    K: int
    L: int
    N: int
    mode: str = FULL_DEGENERATE
    n_times: int = 0
    lambda_cp: float = 0.01
    beta_simplex: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}", component=_COMPONENT)
        if min(self.K, self.L, self.N) < 1:
            raise ParameterError("K, L and N must be positive", component=_COMPONENT)
        if self.mode == TEMPORAL_RETAINED and self.n_times < 1:
            raise ParameterError("temporal mode needs n_times >= 1", component=_COMPONENT)
        if self.lambda_cp < 0 or self.beta_simplex < 0:
            raise ParameterError("penalty weights must be nonnegative", component=_COMPONENT)

    @property
    def kernel_times(self):
        return self.n_times if self.mode == TEMPORAL_RETAINED else 0


@dataclass(frozen=True)
class MuscatParams:
    factors: DegenerateCPFactors
    k: np.ndarray
    Wspat: tuple
    Vtemp: tuple

    def __post_init__(self):
        k = np.array(self.k, dtype=np.float64).reshape(-1)
        W = tuple(np.array(w, dtype=np.float64) for w in self.Wspat)
        V = tuple(np.array(v, dtype=np.float64) for v in self.Vtemp)
        f = self.factors
        shape = (f.N, f.K)
        if k.shape != (f.L,) or len(W) != f.L or len(V) != f.L:
            raise ShapeError("k, Wspat and Vtemp must have one entry per scale", component=_COMPONENT)
        if any(w.shape != shape for w in W) or any(v.shape != shape for v in V):
            raise ShapeError(f"spatial/temporal weights must be {shape}", component=_COMPONENT)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "Wspat", W)
        object.__setattr__(self, "Vtemp", V)

    @property
    def mode(self):
        return self.factors.mode

    def blocks(self):
        f = self.factors
        return {
            "a": f.a,
            "b" if f.mode == FULL_DEGENERATE else "B": f.b,
            "C": np.stack(f.C),
            "k": self.k,
            "W": np.stack(self.Wspat),
            "V": np.stack(self.Vtemp),
        }

    @classmethod
    def from_blocks(cls, blocks, mode=FULL_DEGENERATE):
        b = blocks["b"] if mode == FULL_DEGENERATE else blocks["B"]
        factors = DegenerateCPFactors(blocks["a"], b, tuple(blocks["C"]), mode)
        return cls(factors, blocks["k"], tuple(blocks["W"]), tuple(blocks["V"]))

    def hyper(self, lambda_cp=0.0, beta_simplex=0.0):
        f = self.factors
        n_times = f.b.shape[0] if f.mode == TEMPORAL_RETAINED else 0
        return MuscatHyper(f.K, f.L, f.N, f.mode, n_times, lambda_cp, beta_simplex)


def muscat_schema(hyper: MuscatHyper) -> ParamSchema:
    K, L, N = hyper.K, hyper.L, hyper.N
    if hyper.mode == FULL_DEGENERATE:
        b = ("b", (K,))
    else:
        b = ("B", (hyper.n_times, K))
    return ParamSchema([("a", (K,)), b, ("C", (L, N, K)), ("k", (L,)),
                        ("W", (L, N, K)), ("V", (L, N, K))])


def _pack(params: MuscatParams, hyper: MuscatHyper):
    return muscat_schema(hyper).vectorize(params.blocks()).values


def _sample(x_scales, hyper):
    x = np.asarray(x_scales, dtype=np.float64)
    if x.shape != (hyper.L, hyper.N):
        raise ShapeError(f"x_scales must be ({hyper.L}, {hyper.N}), got {x.shape}", component=_COMPONENT)
    return x[None]


def _time(t, hyper):
    if hyper.mode == TEMPORAL_RETAINED and not 0 <= t < hyper.n_times:
        raise ShapeError(f"time {t} outside the {hyper.n_times} temporal factor rows", component=_COMPONENT)
    return np.array([t], dtype=np.int64)


def muscat_predict(x_scales, t, params: MuscatParams) -> float:
    """Scalar prediction from ``L`` predictor vectors of length ``N``."""
    hyper = params.hyper()
    theta = _pack(params, hyper)[None]
    return float(kernels.active.predict(_sample(x_scales, hyper), _time(t, hyper), theta,
                                        hyper.K, hyper.kernel_times)[0])


def muscat_loss(x_scales, t, y, params: MuscatParams, hyper: MuscatHyper) -> float:
    loss, _ = _loss_grad(x_scales, t, y, params, hyper)
    return float(loss[0])


def muscat_grad(x_scales, t, y, params: MuscatParams, hyper: MuscatHyper) -> MuscatParams:
    """Analytic gradient of :func:`muscat_loss`, shaped like ``params``."""
    _, grad = _loss_grad(x_scales, t, y, params, hyper)
    schema = muscat_schema(hyper)
    g = grad[0]
    if not np.all(np.isfinite(g)):
        block = schema.block_of(int(np.argmin(np.isfinite(g))))
        raise NumericError(f"non-finite gradient in block {block!r}", block=block, component=_COMPONENT)
    return MuscatParams.from_blocks(schema.devectorize(g), hyper.mode)


def _loss_grad(x_scales, t, y, params, hyper):
    if params.hyper().kernel_times != hyper.kernel_times or params.mode != hyper.mode:
        raise ShapeError("params do not match hyperparameters", component=_COMPONENT)
    theta = _pack(params, hyper)[None]
    return kernels.active.loss_grad(_sample(x_scales, hyper), _time(t, hyper), np.array([y], dtype=np.float64),
                                    theta, hyper.K, hyper.kernel_times, hyper.lambda_cp, hyper.beta_simplex)


def effective_scale_weights(params) -> tuple[np.ndarray, float]:
    """Squared scale weights and their sum. The sum is reported, never enforced."""
    k = params.k if isinstance(params, MuscatParams) else np.asarray(params, dtype=np.float64)
    alpha = k * k
    return alpha, float(alpha.sum())


class MuscatModel(Model):
    """Flat-vector adapter of the MUSCAT prediction/loss for the trainer.

    Samples are ``(L, N)`` arrays holding the predictor vector of every scale
    at one ``(t, s)``.
    """

    def __init__(self, N, L, K=2, mode=FULL_DEGENERATE, n_times=0, lambda_cp=0.01, beta_simplex=1.0,
                 backend=None):
        self.hyper = MuscatHyper(K=K, L=L, N=N, mode=mode, n_times=n_times if mode == TEMPORAL_RETAINED else 0,
                                 lambda_cp=lambda_cp, beta_simplex=beta_simplex)
        self.name = "sum-muscat" if mode == FULL_DEGENERATE else "sum-muscat-temporal"
        self.schema = muscat_schema(self.hyper)
        self._kern = kernels.get_backend(backend)

    @property
    def backend(self):
        return self._kern.name

    def init_params(self, rng):
        theta = rng.normal(0.0, 0.1, size=self.size)
        theta[self.schema.slices["k"]] = 1.0 / np.sqrt(self.hyper.L)
        return theta

    def unpack(self, theta) -> MuscatParams:
        return MuscatParams.from_blocks(self.schema.devectorize(np.asarray(theta)), self.hyper.mode)

    def pack(self, params: MuscatParams) -> np.ndarray:
        return _pack(params, self.hyper)

    def predict(self, x, t, theta):
        return float(self.batch_predict(np.asarray(x)[None], [t], np.asarray(theta)[None])[0])

    def loss(self, x, t, y, theta):
        return float(self.batch_loss_grad(np.asarray(x)[None], [t], [y], np.asarray(theta)[None])[0][0])

    def loss_grad(self, x, t, y, theta):
        return self.batch_loss_grad(np.asarray(x)[None], [t], [y], np.asarray(theta)[None])[1][0]

    def batch_predict(self, xs, ts, thetas):
        return self._kern.predict(xs, ts, thetas, self.hyper.K, self.hyper.kernel_times)

    def batch_loss_grad(self, xs, ts, ys, thetas):
        h = self.hyper
        return self._kern.loss_grad(xs, ts, ys, thetas, h.K, h.kernel_times, h.lambda_cp, h.beta_simplex)


def baseline_joint_config(**overrides):
    """Plain joint SGD: no inner split and no graph term.

    With ``alpha = 0`` every task's split parameter equals the shared one, so
    the outer update is a summed-gradient SGD step on the shared parameters.
    """
    from .trainer import FIRST_ORDER, GeneralTrainConfig

    cfg = dict(alpha=0.0, lambda_graph=0.0, meta_grad=FIRST_ORDER)
    cfg.update(overrides)
    cfg["alpha"] = 0.0
    cfg["lambda_graph"] = 0.0
    return GeneralTrainConfig(**cfg)

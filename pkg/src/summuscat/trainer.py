"""Two-step training: general meta-training followed by per-task fine-tuning.

General training repeats, until convergence,

1. for every task ``i`` draw a time ``t_i ~ p(t)`` and split off
   ``theta_i = theta* - alpha * grad L_i(theta*)``;
2. stack ``W = [theta_1, ..., theta_S]`` and descend
   ``sum_i L_i(theta_i) + lambda_graph * tr(W (D - A) W^T)`` with respect to
   ``theta*``, chaining through the split either to first order (identity
   Jacobian) or exactly via Hessian-vector products.

Fine-tuning then runs plain gradient descent from ``theta*`` over the most
recent ``ft_len`` steps of a single task's history.

Determinism: each task owns an RNG stream keyed by (seed, task id), tasks
are processed in ascending id order and the outer gradient is reduced in
that order, so results do not depend on task input order or thread count.
"""
from __future__ import annotations

import dataclasses
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DivergenceError, NumericError, ParameterError, ShapeError
from .graph import TaskGraph, laplacian_trace, laplacian_trace_grad
from .models import Model, check_finite
from .tensor import ParamVector

FIRST_ORDER = "first-order"
SECOND_ORDER = "second-order"
UNIFORM = "uniform"
GEOMETRIC = "geometric"
PATIENCE = 5
DIVERGENCE_LIMIT = 1e12

_COMPONENT = "trainer"
_INIT_KEY = 0x5EED


@dataclass(frozen=True)
class GeneralTrainConfig:
    alpha: float = 0.01
    beta_outer: float = 0.0005
    lambda_graph: float = 0.0
    omega: float | None = None
    time_dist: str = UNIFORM
    rho: float = 0.9
    meta_grad: str = FIRST_ORDER
    max_outer_iters: int = 2000
    converge_tol: float = 1e-6
    seed: int = 0
    batch_size: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta_outer < 0 or self.lambda_graph < 0:
            raise ParameterError("alpha, beta_outer and lambda_graph must be nonnegative", component=_COMPONENT)
        if self.omega is not None and not self.omega > 0:
            raise ParameterError("omega must be positive", component=_COMPONENT)
        if self.time_dist not in (UNIFORM, GEOMETRIC):
            raise ParameterError(f"unknown time_dist {self.time_dist!r}", component=_COMPONENT)
        if self.time_dist == GEOMETRIC and not 0 < self.rho < 1:
            raise ParameterError("rho must lie in (0, 1)", component=_COMPONENT)
        if self.meta_grad not in (FIRST_ORDER, SECOND_ORDER):
            raise ParameterError(f"unknown meta_grad {self.meta_grad!r}", component=_COMPONENT)
        if self.max_outer_iters < 0 or self.batch_size < 1 or self.converge_tol < 0:
            raise ParameterError("invalid iteration budget, batch size or tolerance", component=_COMPONENT)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass(frozen=True)
class TaskTrainConfig:
    gamma: float = 0.002
    x_updates: int = 5
    ft_len: int = 40

    def __post_init__(self):
        if self.gamma < 0 or self.x_updates < 0 or self.ft_len < 0:
            raise ParameterError("gamma, x_updates and ft_len must be nonnegative", component=_COMPONENT)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def _from_dict(cls, d):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ParameterError(f"unknown {cls.__name__} keys: {sorted(unknown)}", component=_COMPONENT)
    return cls(**d)


@dataclass(frozen=True)
class TrainState:
    theta_star: np.ndarray
    iter: int = 0
    loss_history: tuple = ()


@dataclass
class TrainReport:
    iterations: int
    final_loss: float
    converged: bool
    wall_time: float
    loss_history: list = field(default_factory=list)


@dataclass(frozen=True)
class TaskSet:
    """Per-task samples: ``x`` is ``(S, T, ...)`` and ``y`` is ``(S, T)``."""

    ids: tuple
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.shape[:2] != y.shape or len(ids) != y.shape[0]:
            raise ShapeError(f"task arrays disagree: {len(ids)} ids, x {x.shape}, y {y.shape}",
                             component=_COMPONENT)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def S(self):
        return len(self.ids)

    @property
    def T(self):
        return self.y.shape[1]

    def take(self, order) -> "TaskSet":
        order = list(order)
        return TaskSet(tuple(self.ids[i] for i in order), self.x[order], self.y[order])

    def select(self, ids: Sequence[str]) -> "TaskSet":
        return self.take([self.ids.index(i) for i in ids])


def _flat(theta):
    if isinstance(theta, ParamVector):
        theta = theta.values
    return np.asarray(theta, dtype=np.float64)


def task_key(task_id) -> int:
    return zlib.crc32(str(task_id).encode("utf-8"))


def task_rng(seed, task_id):
    """RNG stream owned by one task for the whole run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, task_key(task_id)]))


def time_probabilities(dist, T, rho=0.9):
    if T < 1:
        raise ParameterError("T must be at least 1", component=_COMPONENT)
    if dist == UNIFORM:
        return np.full(T, 1.0 / T)
    if dist == GEOMETRIC:
        if not 0 < rho < 1:
            raise ParameterError("rho must lie in (0, 1)", component=_COMPONENT)
        w = rho ** np.arange(T - 1, -1, -1, dtype=np.float64)
        return w / w.sum()
    raise ParameterError(f"unknown time distribution {dist!r}", component=_COMPONENT)


def sample_time_index(dist, T, rng, rho=0.9, size=None):
    """Draw time indices in ``[0, T)``; geometric weights favour recent times."""
    p = time_probabilities(dist, T, rho)
    if dist == UNIFORM:
        return rng.integers(0, T, size=size) if size is not None else int(rng.integers(0, T))
    draw = rng.choice(T, size=size, p=p)
    return draw if size is not None else int(draw)


def inner_update(theta_star, model: Model, x, t, y, alpha):
    """One gradient step away from the shared parameters for a single sample."""
    theta_star = _flat(theta_star)
    g = np.asarray(model.loss_grad(x, t, y, theta_star), dtype=np.float64)
    check_finite(g, model.schema)
    return theta_star - alpha * g


class _Runner:
    """Batched model evaluation, optionally split across threads by row."""

    def __init__(self, model, threads=1):
        self.model = model
        self.threads = max(1, int(threads))
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _split(self, n):
        if self.pool is None or n < 2 * self.threads:
            return None
        return np.array_split(np.arange(n), self.threads)

    def loss_grad(self, xs, ts, ys, thetas):
        chunks = self._split(len(ts))
        if chunks is None:
            return self.model.batch_loss_grad(xs, ts, ys, thetas)
        parts = list(self.pool.map(
            lambda c: self.model.batch_loss_grad(xs[c], ts[c], ys[c], thetas[c]), chunks))
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def predict(self, xs, ts, thetas):
        chunks = self._split(len(ts))
        if chunks is None:
            return self.model.batch_predict(xs, ts, thetas)
        return np.concatenate(list(self.pool.map(
            lambda c: self.model.batch_predict(xs[c], ts[c], thetas[c]), chunks)))

    def hvp(self, xs, ts, ys, theta, vs):
        """Hessian-vector products at a shared ``theta``, one direction per row."""
        rows = np.broadcast_to(theta, vs.shape)
        if self.model.batch_hvp is not None:
            return self.model.batch_hvp(xs, ts, ys, np.ascontiguousarray(rows), vs)
        norms = np.sqrt(np.einsum("bp,bp->b", vs, vs))
        safe = np.where(norms > 0, norms, 1.0)
        u = vs / safe[:, None]
        h = 1e-5 * (1.0 + float(np.max(np.abs(theta), initial=0.0)))
        _, gp = self.loss_grad(xs, ts, ys, rows + h * u)
        _, gm = self.loss_grad(xs, ts, ys, rows - h * u)
        out = (gp - gm) / (2.0 * h) * norms[:, None]
        out[norms == 0] = 0.0
        return out


def outer_step(state: TrainState, model: Model, samples, graph: TaskGraph, cfg: GeneralTrainConfig,
               runner: _Runner | None = None) -> TrainState:
    """One general-training iteration on pre-drawn samples.

    ``samples`` is ``(xs, ts, ys)`` with leading shape ``(S, b)``: ``b`` draws
    per task that are averaged into that task's loss.
    """
    xs, ts, ys = samples
    ts = np.asarray(ts, dtype=np.int64)
    if ts.ndim == 1:
        xs, ts, ys = np.asarray(xs)[:, None], ts[:, None], np.asarray(ys)[:, None]
    S, b = ts.shape
    if S != graph.S:
        raise ShapeError(f"{S} tasks but graph has {graph.S} nodes", component=_COMPONENT)
    own = runner is None
    runner = runner or _Runner(model)
    try:
        theta = _flat(state.theta_star)
        P = theta.size
        X = np.ascontiguousarray(np.asarray(xs, dtype=np.float64).reshape(S * b, *np.shape(xs)[2:]))
        T_ = ts.reshape(-1)
        Y = np.asarray(ys, dtype=np.float64).reshape(-1)

        _, g0 = runner.loss_grad(X, T_, Y, np.ascontiguousarray(np.broadcast_to(theta, (S * b, P))))
        g0 = g0.reshape(S, b, P).mean(axis=1)
        check_finite(g0, model.schema)
        thetas = theta[None, :] - cfg.alpha * g0

        l1, g1 = runner.loss_grad(X, T_, Y, np.repeat(thetas, b, axis=0))
        task_loss = l1.reshape(S, b).mean(axis=1)
        v = g1.reshape(S, b, P).mean(axis=1)
        objective = float(_ordered_sum(task_loss))
        if cfg.lambda_graph > 0:
            W = thetas.T
            objective += cfg.lambda_graph * laplacian_trace(W, graph)
            v = v + cfg.lambda_graph * laplacian_trace_grad(W, graph).T

        if cfg.meta_grad == SECOND_ORDER and cfg.alpha > 0:
            hv = runner.hvp(X, T_, Y, theta, np.repeat(v, b, axis=0)).reshape(S, b, P).mean(axis=1)
            v = v - cfg.alpha * hv

        total = _ordered_sum(v)
        check_finite(total, model.schema)
        new_theta = theta - cfg.beta_outer * total
    finally:
        if own:
            runner.close()
    return TrainState(new_theta, state.iter + 1, state.loss_history + (objective,))


def _ordered_sum(rows):
    """Sum over the leading axis strictly in index order."""
    acc = np.array(rows[0], dtype=np.float64, copy=True)
    for r in rows[1:]:
        acc += r
    return acc


def meta_objective(theta_star, model: Model, samples, graph: TaskGraph, cfg: GeneralTrainConfig) -> float:
    """The objective whose (exact) gradient the second-order outer step follows."""
    xs, ts, ys = samples
    theta = _flat(theta_star)
    thetas = np.stack([theta - cfg.alpha * model.loss_grad(x, int(t), float(y), theta)
                       for x, t, y in zip(xs, ts, ys)])
    total = sum(model.loss(x, int(t), float(y), th) for x, t, y, th in zip(xs, ts, ys, thetas))
    if cfg.lambda_graph > 0:
        total += cfg.lambda_graph * laplacian_trace(thetas.T, graph)
    return float(total)


def draw_schedule(cfg: GeneralTrainConfig, ids, T):
    """Pre-drawn time indices ``(S, max_outer_iters, batch_size)``, one stream per task id."""
    out = np.empty((len(ids), cfg.max_outer_iters, cfg.batch_size), dtype=np.int64)
    for i, tid in enumerate(ids):
        out[i] = sample_time_index(cfg.time_dist, T, task_rng(cfg.seed, tid), cfg.rho,
                                   size=(cfg.max_outer_iters, cfg.batch_size))
    return out


def initial_theta(model: Model, seed) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _INIT_KEY]))
    return np.asarray(model.init_params(rng), dtype=np.float64)


def _converged(history, tol):
    if len(history) <= PATIENCE:
        return False
    for k in range(len(history) - PATIENCE, len(history)):
        prev, cur = history[k - 1], history[k]
        if abs(cur - prev) > tol * (1.0 + abs(prev)):
            return False
    return True


def _as_taskset(data):
    if isinstance(data, TaskSet):
        return data
    if hasattr(data, "to_tasks"):
        return data.to_tasks()
    raise ShapeError("expected a TaskSet or Dataset", component=_COMPONENT)


def train_general(data, model: Model, graph: TaskGraph, cfg: GeneralTrainConfig, threads=1,
                  theta0=None, callback=None):
    """Run general training; returns ``(theta_star, report)``.

    Stops once the iteration objective changes by at most
    ``converge_tol * (1 + |previous|)`` for five consecutive iterations, or
    after ``max_outer_iters``.
    """
    tasks = _as_taskset(data)
    if tasks.S != graph.S:
        raise ShapeError(f"{tasks.S} tasks but graph has {graph.S} nodes", component=_COMPONENT)
    order = sorted(range(tasks.S), key=lambda i: tasks.ids[i])
    tasks = tasks.take(order)
    graph = graph.permuted(order)

    start = time.perf_counter()
    theta = initial_theta(model, cfg.seed) if theta0 is None else _flat(theta0).copy()
    if theta.shape != (model.size,):
        raise ShapeError(f"initial theta has shape {theta.shape}, model needs ({model.size},)",
                         component=_COMPONENT)
    state = TrainState(theta)
    converged = False
    if cfg.max_outer_iters:
        schedule = draw_schedule(cfg, tasks.ids, tasks.T)
        rows = np.arange(tasks.S)[:, None]
        runner = _Runner(model, threads)
        try:
            for it in range(cfg.max_outer_iters):
                tt = schedule[:, it, :]
                samples = (tasks.x[rows, tt], tt, tasks.y[rows, tt])
                try:
                    state = outer_step(state, model, samples, graph, cfg, runner)
                except NumericError as exc:
                    raise DivergenceError(f"iteration {it}: {exc}", iteration=it, component=_COMPONENT) from exc
                last = state.loss_history[-1]
                if not np.isfinite(last) or last > DIVERGENCE_LIMIT:
                    raise DivergenceError(f"training diverged at iteration {it} (objective {last:.3g})",
                                          iteration=it, component=_COMPONENT)
                if callback is not None:
                    callback(state)
                if _converged(state.loss_history, cfg.converge_tol):
                    converged = True
                    break
        finally:
            runner.close()
    history = list(state.loss_history)
    report = TrainReport(
        iterations=state.iter,
        final_loss=history[-1] if history else float("nan"),
        converged=converged,
        wall_time=time.perf_counter() - start,
        loss_history=history,
    )
    return ParamVector(state.theta_star, model.schema), report


def _window(t0, cfg: TaskTrainConfig, T):
    if not 0 <= t0 <= T:
        raise ParameterError(f"prediction time {t0} outside [0, {T}]", component=_COMPONENT)
    if cfg.ft_len > t0:
        raise ParameterError(f"ft_len={cfg.ft_len} exceeds the {t0} steps of history before t0={t0}",
                             component=_COMPONENT)
    return range(t0 - cfg.ft_len, t0)


def train_task_specific(theta_star, model: Model, task_x, task_y, t0: int, cfg: TaskTrainConfig):
    """Fine-tune on the ``ft_len`` steps just before ``t0`` and predict at ``t0``.

    Returns ``(theta_s, prediction)``; the prediction is ``None`` when ``t0``
    is past the end of the supplied series.
    """
    task_x = np.asarray(task_x, dtype=np.float64)
    task_y = np.asarray(task_y, dtype=np.float64)
    theta = _flat(theta_star).copy()
    for t in _window(t0, cfg, len(task_y)):
        for _ in range(cfg.x_updates):
            g = np.asarray(model.loss_grad(task_x[t], t, float(task_y[t]), theta), dtype=np.float64)
            check_finite(g, model.schema)
            theta = theta - cfg.gamma * g
    pred = model.predict(task_x[t0], t0, theta) if t0 < len(task_y) else None
    return ParamVector(theta, model.schema), pred


def finetune_tasks(theta_star, model: Model, tasks: TaskSet, t0: int, cfg: TaskTrainConfig, threads=1):
    """Fine-tune every task independently from ``theta_star``; returns ``(S, P)``.

    Row ``s`` equals ``train_task_specific`` on task ``s`` alone.
    """
    theta = np.ascontiguousarray(np.tile(_flat(theta_star), (tasks.S, 1)))
    window = _window(t0, cfg, tasks.T)
    if cfg.gamma == 0 or cfg.x_updates == 0:
        return theta
    runner = _Runner(model, threads)
    try:
        for t in window:
            xs = np.ascontiguousarray(tasks.x[:, t])
            ts = np.full(tasks.S, t, dtype=np.int64)
            ys = tasks.y[:, t]
            for _ in range(cfg.x_updates):
                _, g = runner.loss_grad(xs, ts, ys, theta)
                check_finite(g, model.schema)
                theta = theta - cfg.gamma * g
    finally:
        runner.close()
    return theta


def predict_tasks(thetas, model: Model, tasks: TaskSet, times: Sequence[int], threads=1):
    """Predictions ``(S, len(times))``; ``thetas`` is one shared vector or one row per task."""
    thetas = _flat(thetas)
    if thetas.ndim == 1:
        thetas = np.tile(thetas, (tasks.S, 1))
    times = np.asarray(list(times), dtype=np.int64)
    S, n = tasks.S, len(times)
    xs = np.ascontiguousarray(tasks.x[:, times].reshape(S * n, *tasks.x.shape[2:]))
    ts = np.tile(times, S)
    rows = np.ascontiguousarray(np.repeat(thetas, n, axis=0))
    runner = _Runner(model, threads)
    try:
        return runner.predict(xs, ts, rows).reshape(S, n)
    finally:
        runner.close()


def mean_task_loss(theta, model: Model, tasks: TaskSet, times: Sequence[int] | None = None) -> np.ndarray:
    """Per-task mean loss over ``times`` (all times by default) at one shared ``theta``."""
    theta = _flat(theta)
    times = np.arange(tasks.T) if times is None else np.asarray(list(times), dtype=np.int64)
    S, n = tasks.S, len(times)
    xs = np.ascontiguousarray(tasks.x[:, times].reshape(S * n, *tasks.x.shape[2:]))
    loss, _ = model.batch_loss_grad(xs, np.tile(times, S), tasks.y[:, times].reshape(-1),
                                    np.ascontiguousarray(np.broadcast_to(theta, (S * n, theta.size))))
    return loss.reshape(S, n).mean(axis=1)


def summed_train_loss(theta, model: Model, tasks: TaskSet, times=None) -> float:
    """Sum over tasks of each task's mean per-sample loss."""
    return float(_ordered_sum(mean_task_loss(theta, model, tasks, times)))

"""Metrics, the coKriging deletion sweep, Task Efficient Point detection and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CokrigeSchedule, Dataset, make_cokrige_schedule
from .errors import DataFormatError, DatasetIOError, ParameterError, SumError
from .graph import StationSet, build_graph
from .models import Model
from .trainer import (GeneralTrainConfig, TaskSet, TaskTrainConfig, finetune_tasks, predict_tasks,
                      train_general)

REPORT_HEADER = ["experiment", "model", "config_hash", "seed", "metric", "value", "wall_time_s"]
CURVE_HEADER = ["deleted_fraction", "mae"]
USAGE_HEADER = ["id", "c1", "c2", "retained"]

_COMPONENT = "eval"


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.size != truth.size:
        raise ParameterError(f"length mismatch: {pred.size} vs {truth.size}", component=_COMPONENT)
    if pred.size == 0:
        raise ParameterError("mae of an empty vector", component=_COMPONENT)
    return float(np.mean(np.abs(pred - truth)))


def derive_seed(seed, index) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint32)[0])


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _jsonable(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


# -- per-station evaluation --------------------------------------------------------


@dataclass
class StationScores:
    ids: tuple
    mae_frozen: np.ndarray
    mae_finetuned: np.ndarray
    pred_frozen: np.ndarray
    pred_finetuned: np.ndarray
    test_times: np.ndarray


def evaluate_stations(theta_star, model: Model, tasks: TaskSet, cut: int, task_cfg: TaskTrainConfig,
                      threads=1) -> StationScores:
    """Test MAE per station with the frozen global parameters and after fine-tuning.

    Fine-tuning uses the ``ft_len`` training steps just before ``cut``; the
    fine-tuned parameters then predict every test time ``cut .. T-1``.
    """
    times = np.arange(cut, tasks.T)
    if times.size == 0:
        raise ParameterError("no test times after the split", component=_COMPONENT)
    truth = tasks.y[:, cut:]
    frozen = predict_tasks(theta_star, model, tasks, times, threads)
    thetas = finetune_tasks(theta_star, model, tasks, cut, task_cfg, threads)
    tuned = predict_tasks(thetas, model, tasks, times, threads)
    return StationScores(
        ids=tasks.ids,
        mae_frozen=np.mean(np.abs(frozen - truth), axis=1),
        mae_finetuned=np.mean(np.abs(tuned - truth), axis=1),
        pred_frozen=frozen,
        pred_finetuned=tuned,
        test_times=times,
    )


# -- coKriging sweep ---------------------------------------------------------------


@dataclass
class CokrigeCurve:
    deleted_fraction: np.ndarray
    mae: np.ndarray
    steps: tuple
    station_mae: list = field(default_factory=list)
    deleted_mae: np.ndarray | None = None


def cokrige_point(tasks: TaskSet, stations: StationSet, cut: int, deleted: Sequence[str], model: Model,
                  general_cfg: GeneralTrainConfig, task_cfg: TaskTrainConfig, deleted_only=False, threads=1):
    """Train on the retained stations' history, then fine-tune and score stations.

    Returns ``(mean_mae, per_station_mae, deleted_station_mae, eval_ids)``.
    ``deleted_station_mae`` is NaN when nothing is deleted. With
    ``deleted_only`` the mean covers only deleted stations (all stations when
    none are deleted).
    """
    deleted = set(deleted)
    retained = [i for i in tasks.ids if i not in deleted]
    if not retained:
        raise ParameterError("every station was deleted", component=_COMPONENT)
    sub = tasks.select(retained)
    train = TaskSet(sub.ids, sub.x[:, :cut], sub.y[:, :cut])
    graph = build_graph(stations.subset(retained), general_cfg.omega)
    theta_star, _ = train_general(train, model, graph, general_cfg, threads=threads)
    scores = evaluate_stations(theta_star, model, tasks, cut, task_cfg, threads)
    mask = np.array([i in deleted for i in tasks.ids])
    per = scores.mae_finetuned
    deleted_mae = float(per[mask].mean()) if mask.any() else float("nan")
    if deleted_only and mask.any():
        return deleted_mae, per[mask], deleted_mae, tuple(np.array(tasks.ids)[mask])
    return float(per.mean()), per, deleted_mae, tasks.ids


def cokrige_sweep(dataset: Dataset, schedule: CokrigeSchedule, model: Model, general_cfg: GeneralTrainConfig,
                  task_cfg: TaskTrainConfig, train_ratio=0.8, steps=None, deleted_only=False,
                  threads=1) -> CokrigeCurve:
    """MAE after deleting the first ``g`` scheduled groups, for each ``g`` in ``steps``.

    ``steps`` defaults to ``0 .. G-1``. The graph and the general parameters
    are rebuilt from the retained stations at every step.
    """
    if set(schedule.deleted_ids(schedule.G)) != set(dataset.stations.ids):
        raise ParameterError("schedule does not cover the dataset's stations", component=_COMPONENT)
    cut = int(np.floor(train_ratio * dataset.T))
    if not 0 < cut < dataset.T:
        raise ParameterError(f"train_ratio {train_ratio} leaves an empty split", component=_COMPONENT)
    steps = tuple(range(schedule.G)) if steps is None else tuple(int(g) for g in steps)
    if any(not 0 <= g < schedule.G for g in steps) or list(steps) != sorted(set(steps)):
        raise ParameterError("steps must be strictly increasing within [0, G)", component=_COMPONENT)
    tasks = dataset.to_tasks()
    maes, per_station, deleted = [], [], []
    for g in steps:
        try:
            m, per, dm, _ = cokrige_point(tasks, dataset.stations, cut, schedule.deleted_ids(g), model,
                                          general_cfg, task_cfg, deleted_only, threads)
        except SumError as exc:
            raise type(exc)(f"deletion step {g}: {exc}", component=exc.component) from exc
        maes.append(m)
        per_station.append(per)
        deleted.append(dm)
    return CokrigeCurve(np.array(steps, dtype=np.float64) / schedule.G, np.array(maes), steps,
                        per_station, np.array(deleted))


@dataclass
class RepeatedCurve:
    deleted_fraction: np.ndarray
    mae: np.ndarray
    std_repeats: np.ndarray
    std_stations: np.ndarray
    curves: list
    schedules: list


def cokrige_repeats(dataset: Dataset, G: int, model: Model, general_cfg: GeneralTrainConfig,
                    task_cfg: TaskTrainConfig, repeats=10, seed=0, **kw) -> RepeatedCurve:
    """Average the sweep over ``repeats`` fresh schedules and initialisations."""
    if repeats < 1:
        raise ParameterError("repeats must be >= 1", component=_COMPONENT)
    curves, schedules = [], []
    for r in range(repeats):
        rs = derive_seed(seed, r)
        sched = make_cokrige_schedule(dataset.stations, G, rs)
        curves.append(cokrige_sweep(dataset, sched, model, dataclasses.replace(general_cfg, seed=rs),
                                    task_cfg, **kw))
        schedules.append(sched)
    stack = np.stack([c.mae for c in curves])
    std_st = np.array([np.mean([np.std(c.station_mae[j]) for c in curves]) for j in range(stack.shape[1])])
    return RepeatedCurve(curves[0].deleted_fraction, stack.mean(axis=0), stack.std(axis=0), std_st,
                         curves, schedules)


# -- Task Efficient Point ------------------------------------------------------------


@dataclass(frozen=True)
class TepResult:
    tep_index: int | None
    delta: float
    baseline: float


def detect_tep(curve, delta=0.05) -> TepResult:
    """First index whose MAE exceeds ``(1 + delta)`` times the no-deletion MAE.

    ``curve`` is a sequence of MAE values or of ``(deleted_fraction, mae)`` pairs.
    """
    values = np.asarray(getattr(curve, "mae", curve), dtype=np.float64)
    if values.ndim == 2 and values.shape[1] == 2:
        values = values[:, 1]
    if values.ndim != 1 or values.size < 2 or not np.all(np.isfinite(values)):
        raise ParameterError("curve needs at least two finite MAE values", component=_COMPONENT)
    if not delta > 0:
        raise ParameterError("delta must be positive", component=_COMPONENT)
    threshold = (1.0 + delta) * values[0]
    above = np.nonzero(values > threshold)[0]
    return TepResult(int(above[0]) if above.size else None, float(delta), float(values[0]))


def export_task_usage(schedule: CokrigeSchedule, tep: TepResult, stations: StationSet):
    """Rows ``(id, c1, c2, retained)``; a station is dropped if deleted before the TEP."""
    if tep.tep_index is None:
        raise ParameterError("no Task Efficient Point to export", component=_COMPONENT)
    gone = set(schedule.deleted_ids(tep.tep_index))
    return [(sid, float(c[0]), float(c[1]), int(sid not in gone)) for sid, c in zip(stations.ids, stations.coords)]


# -- reports -------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


@dataclass
class RunReport:
    experiment: str
    model: str
    config_hash: str
    seed: int
    rows: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    record_time: bool = False

    def add(self, metric, value, wall_time=None):
        value = float(value)
        if not np.isfinite(value):
            raise ParameterError(f"metric {metric!r} is not finite", component=_COMPONENT)
        wt = "" if wall_time is None or not self.record_time else repr(round(float(wall_time), 6))
        self.rows.append([self.experiment, self.model, self.config_hash, str(self.seed), metric, value, wt])

    def add_curve(self, name, fractions, maes):
        fr = np.asarray(fractions, dtype=np.float64)
        if np.any(np.diff(fr) <= 0) or np.any(fr < 0) or np.any(fr > 1):
            raise ParameterError("deleted fractions must be strictly increasing within [0, 1]",
                                 component=_COMPONENT)
        self.curves[name] = (fr, np.asarray(maes, dtype=np.float64))

    def csv_text(self):
        return rows_to_csv(REPORT_HEADER, self.rows)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def curve_csv(fractions, maes) -> str:
    return rows_to_csv(CURVE_HEADER, zip((float(f) for f in fractions), (float(m) for m in maes)))


def read_csv(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc.strerror or exc}", component=_COMPONENT) from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataFormatError(f"{path}: empty file", component=_COMPONENT)
    return rows[0], rows[1:]


def read_curve(path):
    header, rows = read_csv(path)
    if header != CURVE_HEADER:
        raise DataFormatError(f"{path}: not a curve CSV", component=_COMPONENT)
    try:
        arr = np.array([[float(a), float(b)] for a, b in rows]).reshape(-1, 2)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}", component=_COMPONENT) from exc
    return arr[:, 0], arr[:, 1]


def render_svg(curves: dict, title="MAE vs deleted fraction") -> str:
    """Minimal line chart on an 800x600 canvas; one polyline per named curve."""
    W, H, left, right, top, bottom = 800, 600, 80, 40, 50, 70
    pw, ph = W - left - right, H - top - bottom
    allx = np.concatenate([np.asarray(c[0], float) for c in curves.values()]) if curves else np.array([0.0, 1.0])
    ally = np.concatenate([np.asarray(c[1], float) for c in curves.values()]) if curves else np.array([0.0, 1.0])
    x0, x1 = 0.0, max(1.0, float(allx.max()))
    y0, y1 = float(ally.min()), float(ally.max())
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="30" text-anchor="middle" font-size="18">{_esc(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(6):
        xv = x0 + i * (x1 - x0) / 5
        yv = y0 + i * (y1 - y0) / 5
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 20}" text-anchor="middle" font-size="12">{xv:.2f}</text>')
        out.append(f'<text x="{left - 8}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="12">{yv:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{H - 20}" text-anchor="middle" font-size="14">deleted fraction</text>')
    out.append(f'<text x="20" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="14" '
               f'transform="rotate(-90 20 {top + ph / 2:.1f})">MAE</text>')
    for j, (name, (xs, ys)) in enumerate(curves.items()):
        colour = palette[j % len(palette)]
        pts = " ".join(f"{sx(float(a)):.2f},{sy(float(b)):.2f}" for a, b in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{left + pw - 10}" y="{top + 20 + 18 * j}" text-anchor="end" font-size="13" '
                   f'fill="{colour}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


__all__ = [
    "CokrigeCurve", "RepeatedCurve", "RunReport", "StationScores", "TepResult", "cokrige_point",
    "cokrige_repeats", "cokrige_sweep", "config_hash", "curve_csv", "derive_seed", "detect_tep",
    "evaluate_stations", "export_task_usage", "mae", "read_curve", "render_svg",
]

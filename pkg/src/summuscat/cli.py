"""Command-line front end.

Every subcommand reads an experiment config JSON with the sections
``dataset``, ``model``, ``general``, ``task``, ``cokrige`` and ``output``;
relative paths inside it resolve against the config file's directory.
Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, SyntheticConfig, generate_synthetic, load_dataset, read_tensor, save_dataset,
                   write_tensor)
from .errors import NumericError, ParameterError, ShapeError, SumError
from .evaluation import (CURVE_HEADER, REPORT_HEADER, RunReport, cokrige_repeats, config_hash, curve_csv,
                         detect_tep, evaluate_stations, export_task_usage, read_csv, render_svg, rows_to_csv,
                         USAGE_HEADER)
from .graph import build_graph
from .models import MODEL_NAMES, make_model
from .trainer import (GeneralTrainConfig, TaskSet, TaskTrainConfig, finetune_tasks, predict_tasks,
                      summed_train_loss, train_general)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = ("experiment", "dataset", "model", "general", "task", "cokrige", "output")
_COMPONENT = "cli"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- config --------------------------------------------------------------------------


@dataclasses.dataclass
class Experiment:
    raw: dict
    base: Path
    seed: int | None
    threads: int
    out: Path
    record_time: bool = False

    @property
    def name(self):
        return str(self.raw.get("experiment", "experiment"))

    def section(self, key):
        sec = self.raw.get(key, {})
        if sec is None:
            return {}
        if not isinstance(sec, dict):
            raise ParameterError(f"config section {key!r} must be an object", component=_COMPONENT)
        return dict(sec)

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def general(self) -> GeneralTrainConfig:
        sec = self.section("general")
        if self.seed is not None:
            sec["seed"] = self.seed
        return GeneralTrainConfig.from_dict(sec)

    def task(self) -> TaskTrainConfig:
        return TaskTrainConfig.from_dict(self.section("task"))

    def synthetic(self) -> SyntheticConfig | None:
        sec = self.section("dataset").get("synthetic")
        if sec is None:
            return None
        sec = dict(sec)
        if self.seed is not None:
            sec["seed"] = self.seed
        return SyntheticConfig.from_dict(sec)

    def train_ratio(self):
        r = self.section("dataset").get("train_ratio", 0.8)
        if not isinstance(r, (int, float)) or not 0 < r < 1:
            raise ParameterError("dataset.train_ratio must lie in (0, 1)", component=_COMPONENT)
        return float(r)

    def dataset(self) -> Dataset:
        sec = self.section("dataset")
        if sec.get("path") is not None:
            return load_dataset(self.path(sec["path"]))
        syn = self.synthetic()
        if syn is None:
            raise ParameterError("config needs dataset.path or dataset.synthetic", component=_COMPONENT)
        return generate_synthetic(syn)

    def model(self, ds: Dataset):
        sec = self.section("model")
        unknown = set(sec) - {"name", "K", "lambda_cp", "beta_simplex"}
        if unknown:
            raise ParameterError(f"unknown model keys: {sorted(unknown)}", component=_COMPONENT)
        name = sec.get("name", "sum-muscat")
        if name not in MODEL_NAMES:
            raise ParameterError(f"unknown model {name!r}", component=_COMPONENT)
        return make_model(name, N=ds.N, L=ds.L, K=int(sec.get("K", 2)), n_times=ds.T,
                          lambda_cp=float(sec.get("lambda_cp", 0.01)),
                          beta_simplex=float(sec.get("beta_simplex", 1.0)))

    def report(self, model_name, seed) -> RunReport:
        resolved = {k: self.raw.get(k) for k in SECTIONS if k in self.raw}
        resolved["_seed"] = seed
        return RunReport(self.name, model_name, config_hash(resolved), seed, record_time=self.record_time)


def _load_config(args) -> Experiment:
    raw, base = {}, Path.cwd()
    if args.config is not None:
        cpath = Path(args.config)
        try:
            text = cpath.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParameterError(f"cannot read config {str(cpath)!r}: {exc.strerror or exc}",
                                 component=_COMPONENT) from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config {cpath.name}: {exc}", component=_COMPONENT) from exc
        if not isinstance(raw, dict):
            raise ParameterError("config must be a JSON object", component=_COMPONENT)
        base = cpath.resolve().parent
    if args.threads is not None and args.threads < 1:
        raise ParameterError("--threads must be >= 1", component=_COMPONENT)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        raise ParameterError("--seed must be an unsigned 64-bit integer", component=_COMPONENT)
    exp = Experiment(raw, base, args.seed, args.threads or 1, Path("."), getattr(args, "timing", False))
    out = args.out if args.out is not None else exp.section("output").get("dir", "out")
    exp.out = Path(out) if args.out is not None else exp.path(out)
    return exp


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _split(ds: Dataset, ratio):
    cut = int(np.floor(ratio * ds.T))
    if not 0 < cut < ds.T:
        raise ParameterError(f"train_ratio {ratio} leaves an empty split for T={ds.T}", component=_COMPONENT)
    return cut


def _theta(exp: Experiment, args, model):
    path = Path(args.theta) if args.theta else exp.out / "theta_star.f64"
    theta = read_tensor(path).reshape(-1)
    if theta.size != model.size:
        raise ShapeError(f"{path.name} holds {theta.size} values, model {model.name} needs {model.size}",
                         component=_COMPONENT)
    return theta


# -- subcommands ---------------------------------------------------------------------


def cmd_generate(exp: Experiment, args):
    if "dataset" in exp.raw:
        syn = exp.synthetic()
        if syn is None:
            raise ParameterError("config has no dataset.synthetic section", component=_COMPONENT)
    else:
        # a bare SyntheticConfig document
        sec = dict(exp.raw)
        if exp.seed is not None:
            sec["seed"] = exp.seed
        syn = SyntheticConfig.from_dict(sec)
    if args.out is not None:
        target = Path(args.out)
    elif exp.section("dataset").get("path") is not None:
        target = exp.path(exp.section("dataset")["path"])
    else:
        target = exp.out / "dataset"
    save_dataset(generate_synthetic(syn), target)
    print(f"wrote dataset to {target}")


def cmd_train_general(exp: Experiment, args):
    ds = exp.dataset()
    model = exp.model(ds)
    gcfg = exp.general()
    cut = _split(ds, exp.train_ratio())
    tasks = ds.to_tasks()
    train = TaskSet(tasks.ids, tasks.x[:, :cut], tasks.y[:, :cut])
    graph = build_graph(ds.stations, gcfg.omega)
    theta, rep = train_general(train, model, graph, gcfg, threads=exp.threads)
    loss = summed_train_loss(theta.values, model, train)

    exp.out.mkdir(parents=True, exist_ok=True)
    write_tensor(exp.out / "theta_star.f64", theta.values.reshape(1, 1, -1))
    _write(exp.out / "loss_history.csv",
           rows_to_csv(["iteration", "objective"], enumerate(float(v) for v in rep.loss_history)))
    report = exp.report(model.name, gcfg.seed)
    report.add("iterations", rep.iterations, rep.wall_time)
    report.add("converged", int(rep.converged))
    report.add("final_objective", rep.final_loss)
    report.add("summed_train_loss", loss)
    _write(exp.out / "train_report.csv", report.csv_text())
    print(f"iterations={rep.iterations} converged={rep.converged} summed_train_loss={loss:.6g}")


def cmd_train_task(exp: Experiment, args):
    ds = exp.dataset()
    model = exp.model(ds)
    tcfg = exp.task()
    cut = _split(ds, exp.train_ratio())
    tasks = ds.to_tasks()
    theta = _theta(exp, args, model)
    start = time.perf_counter()
    scores = evaluate_stations(theta, model, tasks, cut, tcfg, exp.threads)
    elapsed = time.perf_counter() - start
    improved = float(np.mean(scores.mae_finetuned <= scores.mae_frozen))

    report = exp.report(model.name, exp.general().seed)
    report.add("mae_frozen_mean", scores.mae_frozen.mean())
    report.add("mae_frozen_std_stations", scores.mae_frozen.std())
    report.add("mae_finetuned_mean", scores.mae_finetuned.mean(), elapsed)
    report.add("mae_finetuned_std_stations", scores.mae_finetuned.std())
    report.add("fraction_improved", improved)
    _write(exp.out / "task_report.csv", report.csv_text())
    rows = []
    for s, sid in enumerate(scores.ids):
        for j, t in enumerate(scores.test_times):
            rows.append([sid, int(t), float(tasks.y[s, t]), float(scores.pred_frozen[s, j]),
                         float(scores.pred_finetuned[s, j])])
    _write(exp.out / "task_predictions.csv",
           rows_to_csv(["id", "t", "y", "pred_frozen", "pred_finetuned"], rows))
    print(f"mae frozen={scores.mae_frozen.mean():.6g} finetuned={scores.mae_finetuned.mean():.6g} "
          f"improved={improved:.3f}")


def cmd_predict(exp: Experiment, args):
    ds = exp.dataset()
    model = exp.model(ds)
    tasks = ds.to_tasks()
    t0 = _split(ds, exp.train_ratio()) if args.t0 is None else args.t0
    if not 0 <= t0 < ds.T:
        raise ParameterError(f"--t0 {t0} outside [0, {ds.T})", component=_COMPONENT)
    theta = _theta(exp, args, model)
    thetas = theta if args.frozen else finetune_tasks(theta, model, tasks, t0, exp.task(), exp.threads)
    times = np.arange(t0, ds.T)
    pred = predict_tasks(thetas, model, tasks, times, exp.threads)
    rows = [[sid, int(t), float(pred[s, j])] for s, sid in enumerate(tasks.ids) for j, t in enumerate(times)]
    _write(exp.out / "predictions.csv", rows_to_csv(["id", "t", "prediction"], rows))
    print(f"wrote {len(rows)} predictions")


def cmd_cokrige(exp: Experiment, args):
    ds = exp.dataset()
    model = exp.model(ds)
    gcfg, tcfg = exp.general(), exp.task()
    sec = exp.section("cokrige")
    unknown = set(sec) - {"groups", "repeats", "delta", "deleted_only", "steps"}
    if unknown:
        raise ParameterError(f"unknown cokrige keys: {sorted(unknown)}", component=_COMPONENT)
    G = int(args.groups if args.groups is not None else sec.get("groups", 12))
    repeats = int(args.repeats if args.repeats is not None else sec.get("repeats", 10))
    delta = float(args.delta if args.delta is not None else sec.get("delta", 0.05))
    deleted_only = bool(args.deleted_only or sec.get("deleted_only", False))
    steps = sec.get("steps")

    start = time.perf_counter()
    rc = cokrige_repeats(ds, G, model, gcfg, tcfg, repeats=repeats, seed=gcfg.seed,
                         train_ratio=exp.train_ratio(), steps=steps, deleted_only=deleted_only,
                         threads=exp.threads)
    elapsed = time.perf_counter() - start
    tep = detect_tep(rc.mae, delta) if rc.mae.size >= 2 else None

    _write(exp.out / "curve.csv", curve_csv(rc.deleted_fraction, rc.mae))
    report = exp.report(model.name, gcfg.seed)
    for fr, m, sr, ss in zip(rc.deleted_fraction, rc.mae, rc.std_repeats, rc.std_stations):
        report.add(f"mae@{fr:.4f}", m)
        report.add(f"std_repeats@{fr:.4f}", sr)
        report.add(f"std_stations@{fr:.4f}", ss)
    report.add("repeats", repeats, elapsed)
    if tep is not None and tep.tep_index is not None:
        report.add("tep_index", tep.tep_index)
        usage = export_task_usage(rc.schedules[0], tep, ds.stations)
        _write(exp.out / "task_usage.csv", rows_to_csv(USAGE_HEADER, usage))
    _write(exp.out / "cokrige_report.csv", report.csv_text())
    _write(exp.out / "curve.svg", render_svg({exp.name: (rc.deleted_fraction, rc.mae)}))
    tep_txt = "none" if tep is None or tep.tep_index is None else str(tep.tep_index)
    print(f"curve points={rc.mae.size} tep={tep_txt}")


def _collect(inputs):
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(p.glob("*.csv")))
        else:
            files.append(p)
    return files


def cmd_report(exp: Experiment, args):
    inputs = args.inputs or [str(exp.out)]
    rows, curves = [], {}
    for f in _collect(inputs):
        header, body = read_csv(f)
        if header == REPORT_HEADER:
            rows.extend(body)
        elif header == CURVE_HEADER:
            name = f"{f.parent.name}/{f.stem}" if f.stem == "curve" else f.stem
            fr = np.array([float(r[0]) for r in body])
            ma = np.array([float(r[1]) for r in body])
            RunReport("", "", "", 0).add_curve(name, fr, ma)  # validates the series
            curves[name] = (fr, ma)
    if not rows and not curves:
        raise ParameterError("no report or curve CSVs among the inputs", component=_COMPONENT)
    _write(exp.out / "report.csv", rows_to_csv(REPORT_HEADER, rows))
    _write(exp.out / "report.svg", render_svg(curves))
    print(f"merged {len(rows)} rows and {len(curves)} curves")


COMMANDS = {
    "generate": cmd_generate,
    "train-general": cmd_train_general,
    "train-task": cmd_train_task,
    "predict": cmd_predict,
    "cokrige": cmd_cokrige,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides every config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--timing", action="store_true", default=argparse.SUPPRESS,
                        help="record wall times in report CSVs (breaks byte-identical reruns)")

    p = _Parser(prog="summuscat", parents=[common], description="SUM-MUSCAT training and evaluation")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset directory")
    sub.add_parser("train-general", parents=[common], help="general training of the shared parameters")
    tt = sub.add_parser("train-task", parents=[common], help="fine-tune every station and score it")
    tt.add_argument("--theta", help="shared parameters file (default: <out>/theta_star.f64)")
    pr = sub.add_parser("predict", parents=[common], help="predict every test time")
    pr.add_argument("--theta")
    pr.add_argument("--t0", type=int, help="first predicted time (default: the train/test cut)")
    pr.add_argument("--frozen", action="store_true", help="skip fine-tuning")
    ck = sub.add_parser("cokrige", parents=[common], help="group-deletion sweep, TEP and task usage")
    ck.add_argument("--groups", type=int)
    ck.add_argument("--repeats", type=int)
    ck.add_argument("--delta", type=float)
    ck.add_argument("--deleted-only", action="store_true", help="score only the deleted stations")
    rp = sub.add_parser("report", parents=[common], help="merge report and curve CSVs")
    rp.add_argument("inputs", nargs="*", help="CSV files or directories")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    for name in ("config", "seed", "out", "threads"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if not hasattr(args, "timing"):
        args.timing = False
    try:
        exp = _load_config(args)
        COMMANDS[args.command](exp, args)
    except NumericError as exc:
        print(f"error [{exc.component}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SumError as exc:
        print(f"error [{exc.component}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error [{_COMPONENT}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance criteria for the package, one test per criterion.

Each test records a PASS/FAIL line through ``conftest.record``; the lines are
echoed at the end of the pytest run. Run with ``-s`` to also see them inline.
"""
import time

import numpy as np
import pytest

from conftest import random_muscat, record
from summuscat.cli import main
from summuscat.data import SyntheticConfig, generate_synthetic
from summuscat.evaluation import cokrige_repeats, detect_tep, evaluate_stations
from summuscat.gradcheck import check_gradient, check_model
from summuscat.graph import StationSet, build_graph, laplacian_trace, laplacian_trace_grad
from summuscat.models import LinearModel
from summuscat.muscat import MuscatModel, baseline_joint_config
from summuscat.tensor import CPFactors, cp_reconstruct
from summuscat.trainer import (GeneralTrainConfig, TaskSet, TaskTrainConfig, TrainState, draw_schedule,
                               initial_theta, outer_step, summed_train_loss, train_general)

FT = TaskTrainConfig(gamma=0.002, x_updates=5, ft_len=40)


def random_graph(r, S):
    coords = r.uniform(0, 10, size=(S, 2))
    return build_graph(StationSet(tuple(f"s{i}" for i in range(S)), coords), omega=float(r.uniform(0.5, 5)))


def loop_reconstruct(A, B, C):
    S, K = A.shape
    out = np.zeros((C.shape[0], B.shape[0], S))
    for n in range(C.shape[0]):
        for t in range(B.shape[0]):
            for s in range(S):
                for k in range(K):
                    out[n, t, s] += A[s, k] * B[t, k] * C[n, k]
    return out


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    worst, count = 0.0, 0
    for mode in ("full", "temporal"):
        for seed in range(60):
            model, theta, x, t, y = random_muscat(np.random.default_rng(seed), mode=mode)
            worst = max(worst, check_model(model, x, t, y, theta).max_error)
            count += 1
    for seed in range(60):
        r = np.random.default_rng(1000 + seed)
        S, P = int(r.integers(2, 9)), int(r.integers(1, 6))
        g = random_graph(r, S)
        res = check_gradient(lambda w: laplacian_trace(w.reshape(P, S), g),
                             lambda w: laplacian_trace_grad(w.reshape(P, S), g), r.normal(size=P * S))
        worst = max(worst, res.max_error)
        count += 1
    elapsed = time.perf_counter() - start
    ok = record(1, worst <= 1e-4 and count >= 100 and elapsed < 10,
                f"{count} instances, worst relative error {worst:.2e} (<= 1e-4), {elapsed:.1f} s (< 10 s)")
    assert ok


def test_criterion_2_oracle_equivalence():
    start = time.perf_counter()
    cp_worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        S, T, N = (int(v) for v in r.integers(1, 7, size=3))
        K = int(r.integers(1, 5))
        f = CPFactors(r.normal(size=(S, K)), r.normal(size=(T, K)), (r.normal(size=(N, K)),))
        got = cp_reconstruct(f, 0).array
        cp_worst = max(cp_worst, float(np.max(np.abs(got - loop_reconstruct(f.A, f.B, f.C[0])))))
    lap_worst = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        S, P = int(r.integers(1, 11)), int(r.integers(1, 5))
        g = random_graph(r, S)
        W = r.normal(size=(P, S))
        pair = 0.5 * sum(g.A[i, j] * np.sum((W[:, i] - W[:, j]) ** 2) for i in range(S) for j in range(S))
        lap_worst = max(lap_worst, abs(laplacian_trace(W, g) - pair))
    elapsed = time.perf_counter() - start
    ok = record(2, cp_worst <= 1e-10 and lap_worst <= 1e-9 and elapsed < 5,
                f"cp max abs diff {cp_worst:.1e} (<= 1e-10), laplacian diff {lap_worst:.1e} (<= 1e-9), "
                f"{elapsed:.1f} s (< 5 s)")
    assert ok


def test_criterion_3_reduction_sanity():
    scalar = LinearModel(1)
    single = build_graph(StationSet(("s0",), np.zeros((1, 2))), omega=1.0)
    cfg = GeneralTrainConfig(alpha=0.05, beta_outer=0.1, lambda_graph=0.0)
    r = np.random.default_rng(0)
    th, ref, traj = np.array([0.3]), 0.3, 0.0
    for _ in range(100):
        x, y = float(r.uniform(-1, 1)), float(r.normal())
        th = outer_step(TrainState(th), scalar, (np.array([[x]]), np.array([0]), np.array([y])), single,
                        cfg).theta_star
        inner = ref - 0.05 * 2 * (ref * x - y) * x
        ref = ref - 0.1 * 2 * (inner * x - y) * x
        traj = max(traj, abs(th[0] - ref))

    r = np.random.default_rng(7)
    w = r.normal(size=2)
    x = r.normal(size=(4, 40, 2))
    tasks = TaskSet(tuple(f"t{i}" for i in range(4)), x, x @ w + 0.3 * r.normal(size=(4, 40)))
    m = LinearModel(2)
    bcfg = baseline_joint_config(beta_outer=0.01, max_outer_iters=150, converge_tol=0.0, seed=11)
    theta_b, _ = train_general(tasks, m, random_graph(r, 4), bcfg)
    theta = initial_theta(m, 11)
    sched = draw_schedule(bcfg, tasks.ids, tasks.T)
    for it in range(bcfg.max_outer_iters):
        grad = np.zeros(2)
        for s in range(tasks.S):
            xs, ys = tasks.x[s, sched[s, it, 0]], tasks.y[s, sched[s, it, 0]]
            grad = grad + 2 * (xs @ theta - ys) * xs
        theta = theta - bcfg.beta_outer * grad
    base = float(np.max(np.abs(theta_b.values - theta)))
    ok = record(3, traj <= 1e-12 and base <= 1e-12,
                f"two-point SGD trajectory diff {traj:.1e}, joint baseline vs plain SGD diff {base:.1e} (<= 1e-12)")
    assert ok


def test_criterion_4_synthetic_convergence():
    start = time.perf_counter()
    ds = generate_synthetic(SyntheticConfig(S=20, T=100, N=4, L=2, K_true=2, seed=0))
    model = MuscatModel(N=4, L=2, K=2, lambda_cp=0.0)
    tasks = ds.to_tasks()
    cfg = GeneralTrainConfig(alpha=0.01, beta_outer=0.003, max_outer_iters=2000, converge_tol=0.0)
    theta, rep = train_general(tasks, model, build_graph(ds.stations), cfg)
    loss = summed_train_loss(theta.values, model, tasks)
    elapsed = time.perf_counter() - start
    ok = record(4, loss <= 1e-3 and rep.iterations <= 2000 and elapsed < 60,
                f"summed train loss {loss:.2e} (<= 1e-3) after {rep.iterations} iterations, "
                f"{elapsed:.1f} s (< 60 s)")
    assert ok


def test_criterion_5_finetuning_benefit():
    fractions = []
    for seed in range(10):
        ds = generate_synthetic(SyntheticConfig(S=20, T=100, N=4, L=2, K_true=2, noise_sigma=0.05,
                                                hetero_sigma=0.3, seed=seed))
        tasks, cut = ds.to_tasks(), 80
        model = MuscatModel(N=4, L=2, K=2, lambda_cp=0.01)
        train = TaskSet(tasks.ids, tasks.x[:, :cut], tasks.y[:, :cut])
        cfg = GeneralTrainConfig(alpha=0.01, beta_outer=0.0005, max_outer_iters=2000, seed=seed)
        theta, _ = train_general(train, model, build_graph(ds.stations), cfg)
        sc = evaluate_stations(theta, model, tasks, cut, FT)
        fractions.append(float(np.mean(sc.mae_finetuned <= sc.mae_frozen)))
    ok = record(5, min(fractions) >= 0.8,
                f"stations improved by fine-tuning, worst seed {min(fractions):.2f}, "
                f"mean {np.mean(fractions):.2f} (>= 0.80 per seed)")
    assert ok


@pytest.fixture(scope="module")
def clustered():
    ds = generate_synthetic(SyntheticConfig(S=60, T=100, N=4, L=2, K_true=2, noise_sigma=0.05, hetero_sigma=0.3,
                                            spatial_corr="clustered", n_clusters=6, seed=0))
    return ds, MuscatModel(N=4, L=2, K=2, lambda_cp=0.01)


def cokrige_cfg(**kw):
    return GeneralTrainConfig(alpha=0.01, beta_outer=0.0002, omega=1000.0, max_outer_iters=2000, **kw)


@pytest.mark.slow
def test_criterion_6a_cokrige_half_deletion(clustered):
    ds, model = clustered
    rc = cokrige_repeats(ds, 12, model, cokrige_cfg(), FT, repeats=10, seed=0, steps=[0, 6])
    ratio = rc.mae[1] / rc.mae[0]
    ok = record("6a", abs(ratio - 1.0) <= 0.10,
                f"MAE at 50% deletion {rc.mae[1]:.4f} vs none {rc.mae[0]:.4f}, ratio {ratio:.4f} (within 10%)")
    assert ok


@pytest.mark.slow
def test_criterion_6b_graph_regularizer_helps_deleted(clustered):
    ds, model = clustered
    deleted = {}
    for lam in (0.0, 0.1):
        cfg = cokrige_cfg(lambda_graph=lam, meta_grad="second-order")
        rc = cokrige_repeats(ds, 12, model, cfg, FT, repeats=10, seed=0, steps=[0, 6])
        deleted[lam] = float(np.mean([c.deleted_mae[1] for c in rc.curves]))
    ok = record("6b", deleted[0.1] <= deleted[0.0],
                f"deleted-station MAE with graph term {deleted[0.1]:.4f} vs without {deleted[0.0]:.4f}")
    assert ok


def test_criterion_7_tep_rule():
    idx = detect_tep([0.30, 0.30, 0.31, 0.40, 0.55], delta=0.05).tep_index
    r = np.random.default_rng(0)
    violations = 0
    for _ in range(100):
        curve = r.uniform(0.01, 2.0, size=int(r.integers(2, 12)))
        lo, hi = np.sort(r.uniform(0.001, 1.0, size=2))
        a, b = detect_tep(curve, lo).tep_index, detect_tep(curve, hi).tep_index
        if (a is None and b is not None) or (a is not None and b is not None and b < a):
            violations += 1
    ok = record(7, idx == 3 and violations == 0,
                f"reference curve index {idx} (== 3), monotonicity violations {violations}/100")
    assert ok


def test_criterion_8_cli_determinism(tmp_path):
    import json

    cfg = {
        "experiment": "determinism",
        "dataset": {"path": "data", "synthetic": {"S": 9, "T": 30, "N": 3, "L": 2, "noise_sigma": 0.05,
                                                  "hetero_sigma": 0.2, "spatial_corr": "clustered",
                                                  "n_clusters": 3, "seed": 4}},
        "model": {"name": "sum-muscat", "K": 2, "lambda_cp": 0.01},
        "general": {"alpha": 0.01, "beta_outer": 0.002, "max_outer_iters": 200, "lambda_graph": 0.1},
        "task": {"gamma": 0.002, "x_updates": 2, "ft_len": 8},
        "cokrige": {"groups": 3, "repeats": 2, "steps": [0, 1, 2], "delta": 0.01},
        "output": {"dir": "out"},
    }
    commands = ["generate", "train-general", "train-task", "predict", "cokrige"]

    def pipeline(root, threads):
        root.mkdir()
        path = root / "exp.json"
        path.write_text(json.dumps(cfg))
        for cmd in commands:
            assert main(["--config", str(path), "--threads", str(threads), "--seed", "3", cmd]) == 0
        assert main(["--out", str(root / "merged"), "report", str(root / "out")]) == 0
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}

    mismatched, total = [], 0
    for threads in (1, 3):
        a = pipeline(tmp_path / f"a{threads}", threads)
        b = pipeline(tmp_path / f"b{threads}", threads)
        total += len(a)
        mismatched += [k for k in a if a[k] != b.get(k)] + sorted(set(b) - set(a))
    ok = record(8, not mismatched and total >= 12,
                f"{total} CSV outputs compared across reruns, {len(mismatched)} differ")
    assert ok

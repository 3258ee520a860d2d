"""Compare the compiled and numpy kernel backends.

Run from the repository root::

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints the best-of-``repeat`` time per call of ``loss_grad`` and ``predict``
for a few batch shapes, then a short end-to-end general-training run.
"""
import argparse
import time

import numpy as np

from summuscat import kernels
from summuscat.data import SyntheticConfig, generate_synthetic
from summuscat.graph import build_graph
from summuscat.muscat import MuscatModel
from summuscat.trainer import GeneralTrainConfig, train_general

SHAPES = [  # (batch, L, N, K)
    (20, 2, 4, 2),
    (240, 3, 5, 3),
    (2000, 3, 8, 4),
]


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape (B,L,N,K)':<20}{'op':<11}" + "".join(f"{b:>12}" for b in kernels.BACKENDS) + f"{'speedup':>10}")
    for B, L, N, K in SHAPES:
        P = kernels.layout(K, L, N, 0)[-1]
        x = rng.standard_normal((B, L, N))
        t = np.zeros(B, dtype=np.int64)
        y = rng.standard_normal(B)
        th = rng.standard_normal((B, P)) * 0.3
        ops = {
            "loss_grad": lambda k: k.loss_grad(x, t, y, th, K, 0, 0.01, 1.0),
            "predict": lambda k: k.predict(x, t, th, K, 0),
        }
        for op, call in ops.items():
            times = {}
            for name in kernels.BACKENDS:
                k = kernels.get_backend(name)
                times[name] = best_of(lambda: call(k), repeat)
            row = "".join(f"{times[n] * 1e6:>10.1f}us" for n in kernels.BACKENDS)
            speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
            print(f"{str((B, L, N, K)):<20}{op:<11}{row}{speed:>9.1f}x")


def bench_training(iters):
    ds = generate_synthetic(SyntheticConfig(S=20, T=100, N=4, L=2, K_true=2, seed=0))
    graph = build_graph(ds.stations)
    cfg = GeneralTrainConfig(alpha=0.01, beta_outer=0.003, max_outer_iters=iters, converge_tol=0.0)
    print(f"\ngeneral training, S=20, {iters} outer iterations")
    results = {}
    for name in kernels.BACKENDS:
        model = MuscatModel(N=4, L=2, K=2, lambda_cp=0.0, backend=name)
        t = time.perf_counter()
        theta, _ = train_general(ds, model, graph, cfg)
        results[name] = theta.values
        print(f"  {name:<10}{time.perf_counter() - t:8.3f} s")
    if len(results) == 2:
        diff = np.max(np.abs(results["python"] - results["compiled"]))
        print(f"  max |theta_python - theta_compiled| = {diff:.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iters", type=int, default=500)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(kernels.BACKENDS)}\n")
    bench_kernels(args.repeat)
    bench_training(args.iters)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Time the numba kernels against the pure-numpy fallback.

The backend is fixed at import time by RERAND_BACKEND, so this script
re-executes itself in a subprocess per backend and prints a small table.
Two workloads: batched Mahalanobis metrics over complete randomizations
(the rejection-sampling inner loop) and regression-forest fit plus predict
(the doubly robust nuisance model).

Usage: python benchmarks/bench_backends.py [--n 500] [--d 10] [--reps 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

HERE = os.path.abspath(__file__)


def run_workloads(n: int, d: int, reps: int) -> dict:
    from rerand import _kernels
    from rerand.balance import make_criterion, metric_values, draw_assignment_batch
    from rerand.finite_pop import ExperimentFrame
    from rerand.outcome_models import OutcomeModelSpec, fit_forest
    from rerand.rng import substream

    rng = substream(2024, "bench")
    frame = ExperimentFrame(rng.standard_normal((n, d)))
    criterion = make_criterion(frame, pa=0.01)
    zmat = draw_assignment_batch(n, n // 2, 20_000, rng)
    x = rng.standard_normal((n, d))
    y = x.sum(axis=1) + rng.standard_normal(n)
    spec = OutcomeModelSpec(kind="forest")

    # Warm-up triggers JIT compilation so timings measure steady state.
    metric_values(criterion, frame, zmat[:64])
    fit_forest(x, y, spec, substream(0, "warm")).predict(x)

    best_metric = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        metric_values(criterion, frame, zmat)
        best_metric = min(best_metric, time.perf_counter() - t0)

    best_forest = float("inf")
    for r in range(reps):
        t0 = time.perf_counter()
        model = fit_forest(x, y, spec, substream(1, "fit", r))
        model.predict(x)
        best_forest = min(best_forest, time.perf_counter() - t0)

    return {
        "backend": _kernels.backend_name(),
        "metric_batch_s": best_metric,
        "metrics_per_s": zmat.shape[0] / best_metric,
        "forest_fit_predict_s": best_forest,
    }


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, default=500)
    parser.add_argument("--d", type=int, default=10)
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.worker:
        print(json.dumps(run_workloads(args.n, args.d, args.reps)))
        return 0

    results = []
    for backend in ("numba", "numpy"):
        env = dict(os.environ, RERAND_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, HERE, "--worker", "--n", str(args.n), "--d", str(args.d),
             "--reps", str(args.reps)],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode != 0:
            print(proc.stderr, file=sys.stderr)
            return proc.returncode
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))

    print(f"workload sizes: n={args.n}, d={args.d}, 20000-assignment metric batch")
    print(f"{'backend':>8} {'metric batch':>14} {'metrics/s':>12} {'forest fit+pred':>16}")
    for r in results:
        print(
            f"{r['backend']:>8} {r['metric_batch_s']:>12.4f}s {r['metrics_per_s']:>12.0f} "
            f"{r['forest_fit_predict_s']:>14.4f}s"
        )
    slow, fast = results[1], results[0]
    print(
        f"numba speedup: metrics x{slow['metric_batch_s'] / fast['metric_batch_s']:.1f}, "
        f"forest x{slow['forest_fit_predict_s'] / fast['forest_fit_predict_s']:.1f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())

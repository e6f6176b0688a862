"""Time the numba and numpy flavors of the two hot kernels.

Run:  python benchmarks/bench_kernels.py [--paths 100000] [--steps 50]

The splitting-iteration benchmark uses the tree QP of the shipped example
config reduced to its inequality-only form, which is exactly what the
backend iterates on in production. The coverage benchmark replays the
error-dynamics membership count used by the reachable-set checks.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from smpc import _kernels, experiment


def _case_study_reduced():
    cfg = experiment.load_config("configs/case_study.toml")
    setup, _ = experiment.build_setup(cfg, warm=False)
    solver = setup.master_solver()
    be = solver.backend
    b_eq = solver._b_eq_fixed.copy()
    ctx = be._prepare(np.zeros(be.n), b_eq, solver._b_in)
    linv, linv_t, rho = be._default_factor
    return be, ctx, linv, linv_t, rho, setup


def _time(fn, repeats=5):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_admm(iters: int):
    be, ctx, linv, linv_t, rho, _ = _case_study_reduced()
    k, ms = be.k, ctx.b_s.shape[0]
    args = lambda: (linv, linv_t, be.H_r, ctx.f_r, be.A_s, be._A_sT, ctx.b_s,
                    np.zeros(k), np.zeros(ms), np.zeros(ms),
                    rho, be.sigma, be.alpha, 0.0, 0.0, iters, 10**9)
    flavors = [("numpy", _kernels.admm_loop_numpy)]
    if _kernels.USING_NUMBA or hasattr(_kernels, "admm_loop_numba"):
        _kernels.admm_loop_numba(*args())  # compile outside the timing
        flavors.append(("numba", _kernels.admm_loop_numba))
    print(f"splitting iteration: {k} reduced vars, {ms} rows, {iters} iterations")
    base = None
    for name, fn in flavors:
        dt = _time(lambda: fn(*args()))
        note = "" if base is None else f"  ({base / dt:.1f}x vs numpy)"
        base = base or dt
        print(f"  {name:>6}: {dt * 1e3:8.2f} ms  ({dt / iters * 1e6:6.2f} us/iter){note}")


def bench_coverage(paths: int, steps: int):
    be, ctx, *_rest, setup = _case_study_reduced()
    em = setup.bmpc_cfg
    a_k = setup.A + setup.B @ setup.K
    n = a_k.shape[0]
    rng = np.random.default_rng(0)
    noise = 0.5 * rng.standard_normal((paths, steps, n))
    shape_inv = np.linalg.inv(np.array([[0.25]])) if n == 1 else np.eye(n)
    levels = np.array([0.708, 0.873, 6.635])
    flavors = [("numpy", _kernels.error_coverage_numpy)]
    if hasattr(_kernels, "error_coverage_numba"):
        _kernels.error_coverage_numba(a_k, noise[:100], shape_inv, levels)
        flavors.append(("numba", _kernels.error_coverage_numba))
    print(f"error coverage: {paths} paths x {steps} steps, {levels.size} levels")
    base = None
    ref = None
    for name, fn in flavors:
        dt = _time(lambda: fn(a_k, noise, shape_inv, levels), repeats=3)
        counts = fn(a_k, noise, shape_inv, levels)
        if ref is None:
            ref = counts
        elif not np.array_equal(ref, counts):
            print("  WARNING: flavors disagree on counts")
        note = "" if base is None else f"  ({base / dt:.1f}x vs numpy)"
        base = base or dt
        print(f"  {name:>6}: {dt * 1e3:8.2f} ms{note}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=50)
    args = ap.parse_args()
    print(f"active backend: {_kernels.backend_name()}")
    bench_admm(args.iters)
    bench_coverage(args.paths, args.steps)


if __name__ == "__main__":
    main()

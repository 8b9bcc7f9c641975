"""Compare the compiled and numpy kernels on expression evaluation and RK4.

Run with ``python benchmarks/bench_kernels.py``.
"""

import argparse
import time

import numpy as np

from fibernf import kernels
from fibernf.hamiltonian import builtin


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ham", default="aniso2")
    parser.add_argument("--points", type=int, nargs="+", default=[1, 16, 1024])
    parser.add_argument("--steps", type=int, default=512)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    try:
        from fibernf import _kernels  # noqa: F401
    except ImportError:
        print("compiled kernels not built; only the numpy backend is available")
        return 1

    H = builtin(args.ham)
    prog = H.gradient_program
    rng = np.random.default_rng(0)
    print(f"{'task':<12}{'points':>8}{'cython [s]':>14}{'python [s]':>14}{'speedup':>10}")
    for n in args.points:
        X = rng.uniform(-0.5, 0.5, size=(n, H.width))
        X[:, H.m] += 1.0
        for task, fn in (
            ("gradient", lambda b: kernels.evaluate(prog, X, backend=b)),
            ("rk4", lambda b: kernels.rk4_hamilton(prog, X, 1.0 / args.steps, args.steps, backend=b)),
        ):
            tc = best_of(lambda: fn("cython"), args.repeat)
            tp = best_of(lambda: fn("python"), args.repeat)
            print(f"{task:<12}{n:>8}{tc:>14.3e}{tp:>14.3e}{tp / tc:>10.1f}")
        a = kernels.rk4_hamilton(prog, X, 1.0 / args.steps, args.steps, backend="cython")[0]
        b = kernels.rk4_hamilton(prog, X, 1.0 / args.steps, args.steps, backend="python")[0]
        print(f"{'':<12}max backend difference {np.max(np.abs(a - b)):.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

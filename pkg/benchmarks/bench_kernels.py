"""Timing comparison of the jitted kernels against their numpy fallbacks.

Runs the two hot kernels (neighborhood top-n selection and union-find
component labeling) on synthetic workloads through both backends and
prints a small table. The dispatch flag is the same one the library
honors at call time, so what is measured here is exactly what ships.

Usage::

    python3 benchmarks/bench_kernels.py [--rows 2000] [--repeat 5]
"""
import argparse
import os
import time

import numpy as np

from fairclust._kernels import (connected_components, numba_enabled,
                                top_n_desc)


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run_backend(disable_numba, rows, keep, edges, repeat):
    os.environ["FAIRCLUST_DISABLE_NUMBA"] = "1" if disable_numba else "0"
    label = "numpy " if disable_numba else "numba "
    if not disable_numba and not numba_enabled():
        print("numba unavailable; skipping jitted backend")
        return None

    rng = np.random.default_rng(0)
    sims = rng.random((rows, rows))
    exclude = np.arange(rows)
    src = rng.integers(0, rows, size=edges)
    dst = rng.integers(0, rows, size=edges)

    # warm-up compiles the jitted path so timings measure steady state
    top_n_desc(sims[:8], exclude[:8], keep)
    connected_components(src[:8], dst[:8], rows)

    t_top = timed(lambda: top_n_desc(sims, exclude, keep), repeat)
    t_cc = timed(lambda: connected_components(src, dst, rows), repeat)
    print(f"{label} top_n_desc({rows}x{rows}, keep={keep}): {t_top * 1e3:8.2f} ms")
    print(f"{label} connected_components({edges} edges):   {t_cc * 1e3:8.2f} ms")
    return t_top, t_cc


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=2000,
                        help="similarity matrix side (default 2000)")
    parser.add_argument("--keep", type=int, default=32,
                        help="neighbors kept per row (default 32)")
    parser.add_argument("--edges", type=int, default=200_000,
                        help="edge count for component labeling")
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing repetitions; best is reported")
    args = parser.parse_args()

    jitted = run_backend(False, args.rows, args.keep, args.edges, args.repeat)
    plain = run_backend(True, args.rows, args.keep, args.edges, args.repeat)
    if jitted and plain:
        print(f"speedup top_n {plain[0] / jitted[0]:.1f}x, "
              f"components {plain[1] / jitted[1]:.1f}x")


if __name__ == "__main__":
    main()

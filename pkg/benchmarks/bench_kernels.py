"""Matvec kernel benchmark: jitted loop kernels against the numpy fallback.

The solver picks between the two implementations at import time via the
REITERATE_NUMBA environment flag; this script times both twins directly so
a single run shows what the flag buys on this machine.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sizes-1d 65536,1048576 --sizes-2d 256,512 --repeats 9
"""

import argparse
import time

import numpy as np

from reiterate import kernels


def best_of(fn, args, repeats):
    fn(*args)  # warm-up; compiles the jitted twin on first call
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases_1d(n, rng):
    # periodic faces wrap (n of them); the box drops the wraparound face
    u = rng.standard_normal(n)
    h = 1.0 / n
    return [
        ("periodic_1d", kernels.matvec_periodic_1d_numpy,
         kernels.matvec_periodic_1d_loops, (1.5 + rng.random(n), u, h)),
        ("box_1d", kernels.matvec_box_1d_numpy,
         kernels.matvec_box_1d_loops, (1.5 + rng.random(n - 1), u, h)),
    ]


def cases_2d(n, rng):
    u = rng.standard_normal((n, n))
    axy = 0.3 * rng.standard_normal((n, n))
    h = 1.0 / n
    per = (1.5 + rng.random((n, n)), 1.5 + rng.random((n, n)), axy, u, h, h)
    box = (1.5 + rng.random((n - 1, n)), 1.5 + rng.random((n, n - 1)), axy, u, h, h)
    return [
        ("periodic_2d", kernels.matvec_periodic_2d_numpy,
         kernels.matvec_periodic_2d_loops, per),
        ("box_2d", kernels.matvec_box_2d_numpy,
         kernels.matvec_box_2d_loops, box),
    ]


def run_case(name, nodes, numpy_fn, loops_fn, args, repeats):
    reference = numpy_fn(*args)
    np.testing.assert_allclose(loops_fn(*args), reference, rtol=1e-12, atol=1e-9)
    t_numpy = best_of(numpy_fn, args, repeats)
    t_loops = best_of(loops_fn, args, repeats)
    print(f"{name:<14} {nodes:>10} {1e3 * t_numpy:>12.3f} {1e3 * t_loops:>12.3f} "
          f"{t_numpy / t_loops:>9.2f}x")


def parse_sizes(text):
    return [int(tok) for tok in text.split(",") if tok]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes-1d", default="4096,65536,1048576",
                        help="comma-separated node counts for the 1d kernels")
    parser.add_argument("--sizes-2d", default="128,256,512",
                        help="comma-separated per-axis sizes for the 2d kernels")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions per kernel (best is reported)")
    opts = parser.parse_args()

    print(f"numba available: {kernels.HAS_NUMBA}, selected: {kernels.USE_NUMBA}")
    if not kernels.HAS_NUMBA:
        print("loop kernels are uncompiled python here; expect them to lose badly")
    print(f"{'kernel':<14} {'nodes':>10} {'numpy ms':>12} {'loops ms':>12} {'speedup':>10}")

    rng = np.random.default_rng(0)
    for n in parse_sizes(opts.sizes_1d):
        for name, numpy_fn, loops_fn, args in cases_1d(n, rng):
            run_case(name, n, numpy_fn, loops_fn, args, opts.repeats)
    for n in parse_sizes(opts.sizes_2d):
        for name, numpy_fn, loops_fn, args in cases_2d(n, rng):
            run_case(name, n * n, numpy_fn, loops_fn, args, opts.repeats)


if __name__ == "__main__":
    main()

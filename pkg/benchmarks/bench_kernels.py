"""Time the compiled and numpy kernel backends on the O(N^2) pair sums.

Usage: python3 benchmarks/bench_kernels.py [--sizes 500,2000,8000] [--repeat 3]
Prints a CSV: kernel, backend, N, seconds (best of --repeat), ratio to numpy.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from causalviews import ecs, kernels


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(n: int, rng: np.random.Generator):
    epl = max(2, int(np.sqrt(n)))
    c = ecs.generate_layered(3, max(2, n // epl), epl, 2, seed=int(rng.integers(1 << 31)))
    W = ecs.views(c, 2)
    order = c.topological_order
    ptr, idx = c._out
    child_idx = c.dst[idx]
    z = rng.random((n, 1))
    V = rng.standard_normal((n, 1))
    a = np.full(n, 1.0 / n)
    R = np.full(n, 8.0 / n)
    box = np.array([1.0])
    bits = kernels.closure_bits(c.n_events, ptr, child_idx, order)
    return {
        "closure_bits": lambda impl: impl.closure_bits(c.n_events, ptr, child_idx, order),
        "acausal_pair_sum": lambda impl: impl.acausal_pair_sum(W, bits),
        "pair_shell_sum": lambda impl: impl.pair_shell_sum(z, V, a, R, box),
    }


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="500,2000,8000")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "compiled" not in impls:
        print("compiled backend not built; only numpy timings are shown", file=sys.stderr)
    rng = np.random.default_rng(0)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["kernel", "backend", "N", "seconds", "speedup_vs_numpy"])
    for n in (int(s) for s in args.sizes.split(",")):
        cases = _cases(n, rng)
        for name, call in cases.items():
            base = _best(lambda: call(impls["python"]), args.repeat)
            w.writerow([name, "python", n, f"{base:.4g}", "1"])
            if "compiled" in impls:
                t = _best(lambda: call(impls["compiled"]), args.repeat)
                w.writerow([name, "compiled", n, f"{t:.4g}", f"{base / t:.2f}"])
            sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

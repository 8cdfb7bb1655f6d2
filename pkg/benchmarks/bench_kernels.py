"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, checked for identical results on the
benchmark inputs, and timed with :mod:`timeit`.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from peftocr import _kernels_py

try:
    from peftocr import _kernels as compiled
except ImportError:
    compiled = None


def workloads():
    rng = np.random.default_rng(0)
    pairs = [(rng.integers(0, 30, 40).tolist(), rng.integers(0, 30, 40).tolist()) for _ in range(200)]
    yield "edit_ops 200 pairs x 40 symbols", lambda mod: [mod.edit_ops(a, b) for a, b in pairs]
    yield "splitmix_block 100k draws", lambda mod: mod.splitmix_block(12345, 100_000)[0]
    yield "mix64 10k calls", lambda mod: [mod.mix64(i) for i in range(10_000)]


def same(x, y) -> bool:
    if isinstance(x, np.ndarray):
        return np.array_equal(x, y)
    return x == y


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if compiled is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'workload':34s} {'python (s)':>11s} {'cython (s)':>11s} {'speedup':>8s}")
    for name, fn in workloads():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat))
        if compiled is None:
            print(f"{name:34s} {t_py:11.4f} {'-':>11s} {'-':>8s}")
            continue
        if not same(fn(_kernels_py), fn(compiled)):
            raise SystemExit(f"{name}: backends disagree")
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat))
        print(f"{name:34s} {t_py:11.4f} {t_c:11.4f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()

"""Counter-based SplitMix64 generator used for all synthetic data.

The algorithm is fixed so that any implementation can reproduce a corpus
bit for bit:

* ``next()`` adds ``0x9E3779B97F4A7C15`` to the 64-bit state and returns
  ``mix64(state)`` (the standard SplitMix64 finaliser).
* ``below(n)`` maps a draw ``x`` to ``((x >> 32) * n) >> 32`` (requires
  ``n < 2**32``).
* ``integers(lo, hi)`` is ``lo + below(hi - lo + 1)`` (inclusive bounds).
* A per-record generator starts from
  ``derive_seed(seed, stream, index) = mix64(mix64(seed ^ mix64(stream)) + index)``
  so records can be produced in any order.
"""
from __future__ import annotations

import numpy as np

from .kernels import mix64, splitmix_block

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, stream: int, index: int = 0) -> int:
    return mix64((mix64((seed & MASK64) ^ mix64(stream)) + index) & MASK64)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        out, self.state = splitmix_block(self.state, 1)
        return int(out[0])

    def below(self, n: int) -> int:
        if not 0 < n < (1 << 32):
            raise ValueError(f"below() needs 0 < n < 2**32, got {n}")
        return ((self.next() >> 32) * n) >> 32

    def integers(self, lo: int, hi: int) -> int:
        return lo + self.below(hi - lo + 1)

    def integer_array(self, lo: int, hi: int, size: int) -> np.ndarray:
        """``size`` independent draws of ``integers(lo, hi)`` as int64."""
        span = hi - lo + 1
        if not 0 < span < (1 << 32):
            raise ValueError("span out of range")
        raw, self.state = splitmix_block(self.state, size)
        vals = ((raw >> np.uint64(32)) * np.uint64(span)) >> np.uint64(32)
        return vals.astype(np.int64) + lo

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the end."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

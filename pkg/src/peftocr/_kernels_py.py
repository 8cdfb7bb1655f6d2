"""Pure-Python implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them line for line
and must return identical results.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix_block(state: int, n: int) -> tuple[np.ndarray, int]:
    """Return the next ``n`` SplitMix64 outputs and the advanced state."""
    state &= MASK64
    if n <= 0:
        return np.zeros(0, dtype=np.uint64), state
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(state) + steps * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        z = z ^ (z >> np.uint64(31))
    return z, (state + n * GAMMA) & MASK64


def edit_ops(reference: Sequence[int], prediction: Sequence[int]) -> tuple[int, int, int]:
    """Unit-cost Levenshtein alignment, returned as (substitutions, insertions, deletions).

    The decomposition follows one optimal path found by backtracking from the
    bottom-right cell, preferring the diagonal, then deletion, then insertion.
    """
    n, m = len(reference), len(prediction)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = i
    for j in range(m + 1):
        table[0][j] = j
    for i in range(1, n + 1):
        row, prev = table[i], table[i - 1]
        r = reference[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (r != prediction[j - 1])
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = table[i][j]
        if i > 0 and j > 0:
            cost = reference[i - 1] != prediction[j - 1]
            if table[i - 1][j - 1] + cost == here:
                subs += cost
                i -= 1
                j -= 1
                continue
        if i > 0 and table[i - 1][j] + 1 == here:
            dels += 1
            i -= 1
            continue
        ins += 1
        j -= 1
    return subs, ins, dels

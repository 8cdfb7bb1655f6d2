# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


def mix64(z):
    return int(_mix(<uint64_t>(int(z) & 0xFFFFFFFFFFFFFFFF)))


def splitmix_block(state, Py_ssize_t n):
    cdef uint64_t s = <uint64_t>(int(state) & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t k
    if n <= 0:
        return np.zeros(0, dtype=np.uint64), int(s)
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] view = out
    with nogil:
        for k in range(n):
            s = s + GAMMA
            view[k] = _mix(s)
    return out, int(s)


def edit_ops(reference, prediction):
    cdef int64_t[::1] ref = np.ascontiguousarray(reference, dtype=np.int64)
    cdef int64_t[::1] pred = np.ascontiguousarray(prediction, dtype=np.int64)
    cdef Py_ssize_t n = ref.shape[0], m = pred.shape[0]
    cdef Py_ssize_t w = m + 1
    cdef Py_ssize_t i, j
    cdef int64_t best, cost, here
    cdef int64_t subs = 0, ins = 0, dels = 0
    cdef int64_t* table = <int64_t*>malloc((n + 1) * w * sizeof(int64_t))
    if table == NULL:
        raise MemoryError()
    try:
        for i in range(n + 1):
            table[i * w] = i
        for j in range(m + 1):
            table[j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                best = table[(i - 1) * w + j - 1] + (ref[i - 1] != pred[j - 1])
                if table[(i - 1) * w + j] + 1 < best:
                    best = table[(i - 1) * w + j] + 1
                if table[i * w + j - 1] + 1 < best:
                    best = table[i * w + j - 1] + 1
                table[i * w + j] = best
        i = n
        j = m
        while i > 0 or j > 0:
            here = table[i * w + j]
            if i > 0 and j > 0:
                cost = ref[i - 1] != pred[j - 1]
                if table[(i - 1) * w + j - 1] + cost == here:
                    subs += cost
                    i -= 1
                    j -= 1
                    continue
            if i > 0 and table[(i - 1) * w + j] + 1 == here:
                dels += 1
                i -= 1
                continue
            ins += 1
            j -= 1
    finally:
        free(table)
    return int(subs), int(ins), int(dels)

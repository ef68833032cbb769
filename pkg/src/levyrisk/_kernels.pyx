# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: counter-based uniforms and Poisson table lookup.

Both functions must agree bit-for-bit with ``_kernels_py``; they only use
integer arithmetic and exact float conversions.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t, int32_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t PATHMUL = 0xD1B54A32D192ED03ULL
cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def counter_uniforms(uint64_t key, int64_t path_start, int64_t n_paths,
                     int64_t n_counters):
    """Uniforms in (0, 1) indexed by (path, counter) for a mixed seed key."""
    out = np.empty((n_paths, n_counters), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef int64_t i, c
    cdef uint64_t pk, h
    with nogil:
        for i in range(n_paths):
            pk = _mix(key ^ (<uint64_t>(path_start + i + 1) * PATHMUL))
            for c in range(n_counters):
                h = _mix(pk + <uint64_t>(c + 1) * GOLDEN)
                o[i, c] = (<double>(h >> 11) + 0.5) * TWO_M53
    return out


def poisson_lookup(const double[::1] u, const double[::1] cdf):
    """Smallest k with u <= cdf[k] (capped at len(cdf) - 1)."""
    cdef Py_ssize_t n = u.shape[0], m = cdf.shape[0], i, k
    out = np.empty(n, dtype=np.int32)
    cdef int32_t[::1] o = out
    with nogil:
        for i in range(n):
            k = 0
            while k < m - 1 and u[i] > cdf[k]:
                k += 1
            o[i] = <int32_t>k
    return out

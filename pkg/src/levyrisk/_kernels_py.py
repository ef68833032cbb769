"""Pure-numpy kernels; bit-identical to the compiled ``_kernels`` module."""
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
PATHMUL = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 1.0 / 9007199254740992.0


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniforms(key, path_start, n_paths, n_counters):
    """Uniforms in (0, 1) indexed by (path, counter) for a mixed seed key."""
    idx = np.arange(path_start + 1, path_start + n_paths + 1, dtype=np.uint64)
    pk = _mix(np.uint64(key) ^ (idx * PATHMUL))
    ctr = np.arange(1, n_counters + 1, dtype=np.uint64) * GOLDEN
    h = _mix(pk[:, None] + ctr[None, :])
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def poisson_lookup(u, cdf):
    """Smallest k with u <= cdf[k] (capped at len(cdf) - 1)."""
    k = np.searchsorted(cdf, u, side="left")
    return np.minimum(k, len(cdf) - 1).astype(np.int32)

"""Select the compiled kernels when available, else the numpy fallback.

Set ``LEVYRISK_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as python_kernels

compiled_kernels = None
if not os.environ.get("LEVYRISK_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_kernels
    except ImportError:  # extension not built
        compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "compiled" if compiled_kernels is not None else "python"

_MASK = (1 << 64) - 1


def seed_key(seed):
    """Mix an arbitrary integer seed into a 64-bit stream key."""
    z = (int(seed) + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)

"""Small shared helpers: curves, Monte Carlo estimates, CSV output."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

Curve = Union[float, Callable]


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo mean with its standard error."""

    value: float
    stderr: float
    n: int = 0

    def within(self, target, n_se=3.0, floor=0.0):
        """True if |value - target| <= n_se * stderr + floor."""
        return abs(self.value - target) <= n_se * self.stderr + floor

    def as_dict(self):
        return {"value": self.value, "stderr": self.stderr, "n": self.n}


def mc_mean(samples) -> Estimate:
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return Estimate(float(x.mean()), se, n)


def curve_values(curve, t) -> np.ndarray:
    """Evaluate a constant or callable curve on an array of times."""
    t = np.asarray(t, dtype=float)
    if callable(curve):
        v = np.asarray(curve(t), dtype=float)
        return np.broadcast_to(v, t.shape).astype(float)
    return np.full(t.shape, float(curve))


def step_coefficients(coef, grid, n_paths=None) -> np.ndarray:
    """Left-point coefficient values on the grid steps.

    Accepts a curve (constant or callable of t) or a precomputed array of
    shape (n_steps,) or (n_paths, n_steps).
    """
    left = np.asarray(grid)[:-1]
    if isinstance(coef, np.ndarray) and coef.ndim >= 1:
        arr = np.asarray(coef, dtype=float)
        if arr.shape[-1] != left.size:
            raise ValueError(f"coefficient has {arr.shape[-1]} steps, grid has {left.size}")
        return arr
    return curve_values(coef, left)


def write_csv(path, header, columns):
    """Write equal-length columns with 17 significant digits."""
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    fmt = []
    for c in columns:
        fmt.append("%d" if np.issubdtype(np.asarray(c).dtype, np.integer) else "%.17g")
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt=fmt)

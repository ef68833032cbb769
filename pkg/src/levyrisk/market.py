"""Itô-Lévy driving noise, stochastic exponentials and Girsanov densities.

The Lévy measure is a finite sum of atoms, nu = sum_j lambda_j * delta_{zeta_j},
so every nu-integral is an exact finite sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from ._backend import kernels, seed_key
from ._util import Curve, Estimate, curve_values, mc_mean, step_coefficients, write_csv


@dataclass(frozen=True)
class JumpAtom:
    """One atom of the Lévy measure.

    Parameters
    ----------
    zeta : float
        Jump mark (nonzero).
    intensity : float
        Arrival rate lambda_j >= 0 per year.
    gamma : float or callable
        Relative jump amplitude of the risky asset, gamma_j(t).
    """

    zeta: float
    intensity: float
    gamma: Curve = 0.0


@dataclass(frozen=True)
class MarketModel:
    """Deterministic-coefficient jump-diffusion market on a uniform grid.

    dS/S = mu dt + sigma dB + sum_j gamma_j (dN_j - lambda_j dt), riskless rate r.
    """

    T: float = 1.0
    n_steps: int = 100
    mu: Curve = 0.05
    sigma: Curve = 0.2
    atoms: tuple = ()
    r: Curve = 0.0

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        self.validate()

    def validate(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError("horizon T must be positive and finite")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        g = self.grid
        for name in ("mu", "sigma", "r"):
            v = curve_values(getattr(self, name), g)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} is not finite on the grid")
        if np.any(curve_values(self.sigma, g) <= 0):
            raise ValueError("sigma must be positive on the grid")
        zetas = [a.zeta for a in self.atoms]
        if len(set(zetas)) != len(zetas):
            raise ValueError("atoms must have distinct marks")
        for a in self.atoms:
            if a.zeta == 0:
                raise ValueError("atom mark must be nonzero")
            if not (np.isfinite(a.intensity) and a.intensity >= 0):
                raise ValueError("atom intensity must be finite and >= 0")
            gv = curve_values(a.gamma, g)
            if not np.all(np.isfinite(gv)):
                raise ValueError("jump amplitude is not finite on the grid")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([a.intensity for a in self.atoms], dtype=float)

    @property
    def has_jumps(self) -> bool:
        return any(a.intensity > 0 for a in self.atoms)

    def with_steps(self, n_steps):
        return MarketModel(self.T, n_steps, self.mu, self.sigma, self.atoms, self.r)

    def price_of_risk(self, t) -> np.ndarray:
        """(mu - r) / sigma evaluated at t."""
        return (curve_values(self.mu, t) - curve_values(self.r, t)) / curve_values(self.sigma, t)


@dataclass(frozen=True)
class Scenario:
    """Girsanov pair (theta0(t), theta1_j(t)) with theta1_j > -1."""

    theta0: Curve = 0.0
    theta1: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "theta1", tuple(self.theta1))

    def validate(self, grid, n_atoms):
        if len(self.theta1) not in (0, n_atoms):
            raise ValueError(f"scenario has {len(self.theta1)} jump curves, market has {n_atoms} atoms")
        for c in self.theta1:
            if np.any(curve_values(c, grid) <= -1):
                raise ValueError("theta1 must exceed -1")
        if not np.all(np.isfinite(curve_values(self.theta0, grid))):
            raise ValueError("theta0 is not finite")


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Seeded sample of Brownian increments and Poisson counts.

    Attributes
    ----------
    model : MarketModel
    seed : int
    dB : ndarray, shape (n_paths, n_steps)
    jumps : ndarray of int32, shape (n_paths, n_steps, n_atoms)
    """

    model: MarketModel
    seed: int
    dB: np.ndarray
    jumps: np.ndarray
    notes: tuple = field(default=())

    @property
    def grid(self) -> np.ndarray:
        return self.model.grid

    @property
    def dt(self) -> float:
        return self.model.dt

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dB.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.jumps.shape[2]

    @property
    def intensities(self) -> np.ndarray:
        return self.model.intensities

    @property
    def W(self) -> np.ndarray:
        """Brownian path on the grid, shape (n_paths, n_steps + 1)."""
        out = np.zeros((self.n_paths, self.n_steps + 1))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    @property
    def counts(self) -> np.ndarray:
        """Cumulative jump counts, shape (n_paths, n_steps + 1, n_atoms)."""
        out = np.zeros((self.n_paths, self.n_steps + 1, self.n_atoms))
        np.cumsum(self.jumps, axis=1, out=out[:, 1:, :])
        return out

    def compensated(self) -> np.ndarray:
        """Compensated increments dN_j - lambda_j dt."""
        return self.jumps - self.intensities[None, None, :] * self.dt

    def noise_state(self) -> np.ndarray:
        """Markov state (W, N_1, ..., N_J) of the driving noise."""
        return np.concatenate([self.W[:, :, None], self.counts], axis=2)

    def truncated(self, n_steps: int) -> "PathEnsemble":
        """Ensemble restricted to the first n_steps grid steps."""
        if not 1 <= n_steps <= self.n_steps:
            raise ValueError("n_steps out of range")
        model = MarketModel(self.model.dt * n_steps, n_steps, self.model.mu,
                            self.model.sigma, self.model.atoms, self.model.r)
        return PathEnsemble(model, self.seed, self.dB[:, :n_steps], self.jumps[:, :n_steps, :], self.notes)

    def subset(self, idx) -> "PathEnsemble":
        return PathEnsemble(self.model, self.seed, self.dB[idx], self.jumps[idx], self.notes)

    def to_csv(self, path):
        """One row per path-step: path, t, dB, count per atom."""
        n, N = self.dB.shape
        cols = [np.repeat(np.arange(n), N), np.tile(self.grid[:-1], n), self.dB.ravel()]
        header = ["path", "t", "dB"]
        for j in range(self.n_atoms):
            cols.append(self.jumps[:, :, j].ravel())
            header.append(f"count_{j}")
        write_csv(path, header, cols)


def _poisson_cdf_table(mean):
    """Cumulative Poisson probabilities, summed sequentially in float."""
    kmax = int(mean + 40.0 * np.sqrt(mean) + 40)
    p = np.exp(-mean)
    cdf = [p]
    for k in range(1, kmax + 1):
        p = p * mean / k
        cdf.append(cdf[-1] + p)
    return np.array(cdf)


def simulate(model: MarketModel, n_paths: int, seed: int, chunk: int = 16384) -> PathEnsemble:
    """Sample Brownian increments and Poisson jump counts.

    Path i draws from a counter-based stream keyed by (seed, i), so its
    increments do not depend on ``n_paths`` or on the chunking.
    """
    model.validate()
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError("n_paths must be a positive integer")
    n_paths = int(n_paths)
    N, J = model.n_steps, model.n_atoms
    n_streams = 1 + J
    dt = model.dt
    key = seed_key(seed)
    lam = model.intensities
    tables = [_poisson_cdf_table(l * dt) if l > 0 else None for l in lam]

    dB = np.empty((n_paths, N))
    jumps = np.zeros((n_paths, N, J), dtype=np.int32)
    sq = np.sqrt(dt)
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        u = kernels.counter_uniforms(key, start, m, N * n_streams).reshape(m, N, n_streams)
        dB[start:start + m] = sq * ndtri(u[:, :, 0])
        for j, tab in enumerate(tables):
            if tab is None:
                continue
            uj = np.ascontiguousarray(u[:, :, 1 + j]).ravel()
            jumps[start:start + m, :, j] = kernels.poisson_lookup(uj, tab).reshape(m, N)
    return PathEnsemble(model, int(seed), dB, jumps)


def _atom_coefficients(gamma, paths):
    """Per-atom step coefficients, shape (J, ...) or None if all zero."""
    J = paths.n_atoms
    if gamma is None or len(gamma) == 0:
        return None
    if len(gamma) != J:
        raise ValueError(f"expected {J} jump coefficients, got {len(gamma)}")
    return [step_coefficients(g, paths.grid) for g in gamma]


def log_exponential_increments(paths: PathEnsemble, alpha: Curve = 0.0, beta: Curve = 0.0,
                               gamma: Sequence | None = None) -> np.ndarray:
    """Increments of log Gamma per step (exact log form, left-point coefficients)."""
    dt = paths.dt
    a = step_coefficients(alpha, paths.grid)
    b = step_coefficients(beta, paths.grid)
    inc = b * paths.dB + (a - 0.5 * b * b) * dt
    coefs = _atom_coefficients(gamma, paths)
    if coefs is not None:
        lam = paths.intensities
        for j, g in enumerate(coefs):
            if np.any(g <= -1):
                raise ValueError("jump coefficient must exceed -1")
            if lam[j] == 0 and not np.any(paths.jumps[:, :, j]):
                continue
            inc = inc + np.log1p(g) * paths.jumps[:, :, j] - g * lam[j] * dt
    return np.broadcast_to(inc, paths.dB.shape)


def stochastic_exponential(paths: PathEnsemble, alpha: Curve = 0.0, beta: Curve = 0.0,
                           gamma: Sequence | None = None) -> np.ndarray:
    """Solution of dG = G(t-)[alpha dt + beta dB + sum_j gamma_j dÑ_j], G(0) = 1.

    Returns
    -------
    ndarray, shape (n_paths, n_steps + 1)
    """
    inc = log_exponential_increments(paths, alpha, beta, gamma)
    logg = np.zeros((paths.n_paths, paths.n_steps + 1))
    np.cumsum(inc, axis=1, out=logg[:, 1:])
    return np.exp(logg)


def girsanov_density(paths: PathEnsemble, scenario: Scenario) -> np.ndarray:
    """Density process M_theta (driftless exponential with beta=theta0, gamma=theta1)."""
    scenario.validate(paths.grid, paths.n_atoms)
    gamma = scenario.theta1 if len(scenario.theta1) else None
    return stochastic_exponential(paths, 0.0, scenario.theta0, gamma)


def relative_entropy(density_T) -> Estimate:
    """Monte Carlo estimate of H(Q|P) = E[M log M] with its standard error."""
    m = np.asarray(density_T, dtype=float)
    if np.any(~np.isfinite(m)) or np.any(m <= 0):
        raise ValueError("density samples must be positive and finite")
    return mc_mean(m * np.log(m))


def asset_log_price(paths: PathEnsemble) -> np.ndarray:
    """log(S1(t)/S1(0)) on the grid for the model's risky asset."""
    m = paths.model
    gam = [a.gamma for a in m.atoms] if m.n_atoms else None
    inc = log_exponential_increments(paths, m.mu, m.sigma, gam)
    out = np.zeros((paths.n_paths, paths.n_steps + 1))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def half_sharpe_integral(model: MarketModel, s: float = 0.0) -> float:
    """int_s^T 0.5 ((mu - r)/sigma)^2 dt, exact for constant coefficients."""
    if not 0.0 <= s <= model.T:
        raise ValueError("s outside [0, T]")
    if not any(callable(c) for c in (model.mu, model.sigma, model.r)):
        th = (float(model.mu) - float(model.r)) / float(model.sigma)
        return 0.5 * th * th * (model.T - s)
    from scipy.integrate import quad
    val, _ = quad(lambda t: 0.5 * float(model.price_of_risk(t)) ** 2, s, model.T,
                  epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(val)

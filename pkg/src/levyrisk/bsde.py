"""Backward SDEs with jumps: linear closed form and regression Monte Carlo.

The BSDE is

    dY = -g(t, Y, Z, K) dt + Z dB + sum_j K_j dÑ_j,   Y(T) = F,

with a finite-atom Lévy measure, so K is a vector with one entry per atom.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb
from typing import Callable

import numpy as np

from ._util import Curve, step_coefficients, write_csv
from .market import PathEnsemble, stochastic_exponential


class RegressionError(RuntimeError):
    """Raised when a regression step cannot be assembled."""


def _cval(c, t):
    # Keep the argument's numeric type (float or Fraction) for scalar times.
    return c(t) if callable(c) else c


@dataclass(frozen=True)
class Driver:
    """Driver g(t, y, z, k) of a BSDE.

    Parameters
    ----------
    eval : callable
        ``eval(t, y, z, k)`` with ``y, z`` of shape (n,) and ``k`` of shape
        (n, n_atoms); returns shape (n,).
    lipschitz_C : float
        Declared Lipschitz constant in (y, z, ||k||_nu).
    theta_bounds : tuple of (lo, hi)
        Per-atom bounds on the jump-domination density, lo > -1.
    depends_on_y : bool
    concave : bool
        Declared concavity in (z, k).
    probe_radius : float
        Radius of the region on which the Lipschitz bound is declared.
    """

    eval: Callable
    lipschitz_C: float = 0.0
    theta_bounds: tuple = ()
    depends_on_y: bool = True
    concave: bool = False
    probe_radius: float = 10.0
    label: str = ""

    def __call__(self, t, y, z, k):
        return self.eval(t, y, z, k)

    def check(self, grid, intensities, n_probes=64, seed=0):
        """Spot-check finiteness at the origin and the declared Lipschitz bound.

        Returns
        -------
        dict with keys ``finite_at_zero``, ``max_ratio`` and ``ok``.
        """
        grid = np.asarray(grid, dtype=float)
        lam = np.asarray(intensities, dtype=float)
        J = lam.size
        zeros = np.zeros(len(grid))
        g0 = np.array([float(np.asarray(self.eval(t, zeros[:1], zeros[:1], np.zeros((1, J))))[0])
                       for t in grid])
        finite = bool(np.all(np.isfinite(g0)))
        rng = np.random.default_rng(seed)
        R = self.probe_radius
        t = rng.choice(grid, n_probes)
        y1, y2, z1, z2 = (rng.uniform(-R, R, n_probes) for _ in range(4))
        if not self.depends_on_y:
            y2 = y1
        k1 = rng.uniform(-R, R, (n_probes, J))
        k2 = rng.uniform(-R, R, (n_probes, J))
        worst = 0.0
        for i in range(n_probes):
            a = float(np.asarray(self.eval(t[i], y1[i:i + 1], z1[i:i + 1], k1[i:i + 1]))[0])
            b = float(np.asarray(self.eval(t[i], y2[i:i + 1], z2[i:i + 1], k2[i:i + 1]))[0])
            if not (np.isfinite(a) and np.isfinite(b)):
                finite = False
                continue
            dist = abs(y1[i] - y2[i]) + abs(z1[i] - z2[i]) + np.sqrt(np.sum(lam * (k1[i] - k2[i]) ** 2))
            if dist > 0:
                worst = max(worst, abs(a - b) / dist)
        ok = finite and worst <= self.lipschitz_C * (1 + 1e-9) + 1e-12
        return {"finite_at_zero": finite, "max_ratio": worst, "ok": bool(ok)}


def zero_driver() -> Driver:
    return Driver(lambda t, y, z, k: 0 * z, 0.0, (), False, True, label="zero")


def quadratic_driver(z_max=10.0) -> Driver:
    """g(z) = -z^2/2, concave; Lipschitz with constant z_max on |z| <= z_max."""
    return Driver(lambda t, y, z, k: -0.5 * z * z, float(z_max), (), False, True,
                  probe_radius=float(z_max) / 2, label="entropic")


def piecewise_linear_driver(z_slopes=(0.0, 0.0), k_slopes=(), intensities=(), y_coef=0, const=0,
                            label="piecewise-linear") -> Driver:
    """g = y_coef*y + min(a1 z, a2 z) + sum_j min(b1_j k_j, b2_j k_j) * lambda_j + const.

    With a1 <= a2 and b1_j <= b2_j the driver is concave in (z, k).  All
    arithmetic is elementwise, so rational inputs stay exact.
    """
    a1, a2 = z_slopes
    ks = [tuple(b) for b in k_slopes]
    lam = list(intensities)

    def g(t, y, z, k):
        out = np.minimum(a1 * z, a2 * z) + _cval(const, t)
        if y_coef:
            out = out + y_coef * y
        for j, (b1, b2) in enumerate(ks):
            kj = k[:, j]
            out = out + np.minimum(b1 * kj, b2 * kj) * lam[j]
        return out

    lam_f = np.asarray(lam, dtype=float)
    kC = np.sqrt(np.sum(lam_f * np.array([max(abs(float(b1)), abs(float(b2))) for b1, b2 in ks]) ** 2)) if ks else 0.0
    C = max(abs(float(y_coef)), abs(float(a1)), abs(float(a2)), kC)
    theta = tuple((float(min(b1, b2)), float(max(b1, b2))) for b1, b2 in ks)
    return Driver(g, C, theta, bool(y_coef), a1 <= a2 and all(b1 <= b2 for b1, b2 in ks), label=label)


@dataclass(frozen=True)
class LinearDriverParams:
    """Coefficients of g = phi + alpha*y + beta*z + sum_j gamma_j lambda_j k_j."""

    phi: Curve = 0.0
    alpha: Curve = 0.0
    beta: Curve = 0.0
    gamma_coef: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "gamma_coef", tuple(self.gamma_coef))

    def validate(self, grid):
        for c in self.gamma_coef:
            if np.any(step_coefficients(c, grid) <= -1):
                raise ValueError("linear jump coefficient must exceed -1")

    def driver(self, intensities, grid=None) -> Driver:
        """Driver object; the Lipschitz bound is taken over ``grid``."""
        lam = list(intensities)
        gam = self.gamma_coef
        if gam and len(gam) != len(lam):
            raise ValueError("gamma_coef must have one curve per atom")

        def g(t, y, z, k):
            out = _cval(self.phi, t) + _cval(self.alpha, t) * y + _cval(self.beta, t) * z
            for j, c in enumerate(gam):
                out = out + _cval(c, t) * lam[j] * k[:, j]
            return out

        ts = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid, dtype=float)

        def mx(c):
            return float(np.max(np.abs(step_coefficients(c, np.append(ts, ts[-1])))))

        lam_f = np.asarray(lam, dtype=float)
        kC = np.sqrt(np.sum(lam_f * np.array([mx(c) for c in gam]) ** 2)) if gam else 0.0
        C = max(mx(self.alpha), mx(self.beta), kC)
        theta = tuple((-mx(c), mx(c)) for c in gam)
        return Driver(g, C, theta, True, True, label="linear")


@dataclass(frozen=True)
class Claim:
    """Terminal claim F with the Markov state used for regression.

    Parameters
    ----------
    payoff : callable
        ``payoff(paths) -> (n_paths,)``; may use the whole path.
    state : callable, optional
        ``state(paths) -> (n_paths, n_steps + 1, d)``.  Defaults to the
        driving-noise state (W, N_1, ..., N_J).
    """

    payoff: Callable
    state: Callable | None = None
    label: str = ""

    def values(self, paths: PathEnsemble) -> np.ndarray:
        v = np.asarray(self.payoff(paths), dtype=float)
        v = np.broadcast_to(v, (paths.n_paths,)).copy()
        if not np.all(np.isfinite(v)):
            raise ValueError(f"claim {self.label!r} is not finite on every path")
        return v

    def markov_state(self, paths: PathEnsemble) -> np.ndarray:
        if self.state is None:
            return paths.noise_state()
        s = np.asarray(self.state(paths), dtype=float)
        if s.ndim == 2:
            s = s[:, :, None]
        return s

    @classmethod
    def constant(cls, a) -> "Claim":
        return cls(lambda p: np.full(p.n_paths, float(a)), label=f"const({a})")

    def shifted(self, a) -> "Claim":
        return Claim(lambda p: self.payoff(p) + a, self.state, f"{self.label}+{a}")

    def mix(self, lam, other: "Claim") -> "Claim":
        return Claim(lambda p: lam * np.asarray(self.payoff(p)) + (1 - lam) * np.asarray(other.payoff(p)),
                     self.state, f"mix({lam})")


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Per-path samples of (Y, Z, K) on the grid.

    Shapes: Y (n_paths, n_steps+1), Z (n_paths, n_steps), K (n_paths, n_steps, n_atoms).
    """

    grid: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    Y0: float
    method_tag: str
    Y0_stderr: float = 0.0
    notes: tuple = field(default=())

    def to_csv(self, path):
        n, N1 = self.Y.shape
        N = N1 - 1
        t = np.tile(self.grid[:-1], n)
        cols = [np.repeat(np.arange(n), N), t, self.Y[:, :-1].ravel(), self.Z.ravel()]
        header = ["path", "t", "Y", "Z"]
        for j in range(self.K.shape[2]):
            cols.append(self.K[:, :, j].ravel())
            header.append(f"K_{j}")
        write_csv(path, header, cols)


def n_basis(dim, degree):
    return comb(dim + degree, degree)


class Projector:
    """Least-squares projection onto polynomials of a state sample.

    Columns are standardized and centered; the intercept is handled by the
    sample mean so that constants are reproduced to rounding.  Linearly
    dependent monomials (e.g. powers of 0/1 jump counts) are dropped by a
    truncated SVD.
    """

    def __init__(self, X, degree, step=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if not np.all(np.isfinite(X)):
            raise RegressionError(f"non-finite regression state at step {step}")
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        keep = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
        self.rank = 0
        self.n_columns = 0
        self.U = None
        if degree < 1 or not np.any(keep):
            return
        Xs = (X[:, keep] - mu[keep]) / sd[keep]
        d = Xs.shape[1]
        cols = []
        for p in range(1, degree + 1):
            for idx in combinations_with_replacement(range(d), p):
                c = Xs[:, idx[0]].copy()
                for i in idx[1:]:
                    c *= Xs[:, i]
                cols.append(c)
        A = np.column_stack(cols)
        A -= A.mean(axis=0)
        self.n_columns = A.shape[1]
        try:
            U, s, _ = np.linalg.svd(A, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise RegressionError(f"singular regression matrix at step {step}: {exc}") from exc
        if s.size == 0 or not np.isfinite(s[0]):
            raise RegressionError(f"singular regression matrix at step {step}")
        r = s > s[0] * 1e-10
        self.rank = int(r.sum())
        self.U = U[:, r] if self.rank else None

    def __call__(self, T):
        T = np.asarray(T, dtype=float)
        mean = T.mean(axis=0)
        if self.U is None:
            return np.broadcast_to(mean, T.shape).copy()
        Tc = T - mean
        return mean + self.U @ (self.U.T @ Tc)


def _martingale_projections(P, Ynext, dB, dNc, control_variate=True):
    """(C, E_n[Y dB], E_n[Y dÑ_j]) with C = E_n[Y_{n+1}].

    The martingale parts are projected from (Y_{n+1} - C); C is measurable
    at step n, so this is the same conditional expectation with far less
    sampling noise (a control variate).
    """
    C = P(Ynext)
    R = Ynext - C if control_variate else Ynext
    cols = [R * dB]
    for j in range(dNc.shape[1]):
        cols.append(R * dNc[:, j])
    return C, P(np.column_stack(cols))


def solve_regression(driver: Driver, claim: Claim, paths: PathEnsemble, basis_degree: int = 3,
                     *, check_driver=True, picard_max=20, picard_tol=1e-12, stop_step=None,
                     control_variate=True) -> BsdeSolution:
    """Backward regression scheme for a general driver.

    At each step n (backwards): Z_n = E_n[Y_{n+1} dB_n]/dt,
    K_{n,j} = E_n[Y_{n+1} dÑ_{n,j}]/(lambda_j dt), C_n = E_n[Y_{n+1}], and
    Y_n solves Y_n = C_n + g(t_n, Y_n, Z_n, K_n) dt by fixed-point iteration
    when the driver depends on y.

    Parameters
    ----------
    stop_step : int, optional
        Grid index of a deterministic stopping time; the driver is zeroed
        after it.  The claim must then be measurable at that step.
    control_variate : bool
        Project (Y_{n+1} - C_n) instead of Y_{n+1} for the martingale parts.
    """
    grid = paths.grid
    N = paths.n_steps
    dt = paths.dt
    lam = paths.intensities
    J = paths.n_atoms
    n = paths.n_paths
    notes = []
    if check_driver:
        chk = driver.check(grid, lam)
        if not chk["ok"]:
            raise ValueError(f"driver {driver.label!r} failed validation: {chk}")
    F = claim.values(paths)
    X = claim.markov_state(paths)
    nb = n_basis(X.shape[2], basis_degree)
    degenerate = n == 1
    if degenerate:
        notes.append("degenerate ensemble: pathwise identity replaces regression")
    elif n < 10 * nb:
        raise ValueError(f"need at least {10 * nb} paths for {nb} basis functions, got {n}")

    Y = np.empty((n, N + 1))
    Z = np.zeros((n, N))
    K = np.zeros((n, N, J))
    Y[:, N] = F
    dNc = paths.compensated()
    last = N if stop_step is None else int(stop_step)
    if last < N:
        Y[:, last:] = F[:, None]
    picard_fail = []
    rank_def = []
    for i in range(last - 1, -1, -1):
        t = grid[i]
        Yn1 = Y[:, i + 1]
        if degenerate:
            C = Yn1.copy()
            z = np.zeros(n)
            k = np.zeros((n, J))
        else:
            P = Projector(X[:, i, :], basis_degree, step=i)
            if P.rank < P.n_columns:
                rank_def.append(i)
            C, proj = _martingale_projections(P, Yn1, paths.dB[:, i], dNc[:, i, :], control_variate)
            z = proj[:, 0] / dt
            k = np.zeros((n, J))
            for j in range(J):
                if lam[j] > 0:
                    k[:, j] = proj[:, 1 + j] / (lam[j] * dt)
        g = np.asarray(driver(t, C, z, k), dtype=float)
        if not np.all(np.isfinite(g)):
            raise RegressionError(f"non-finite driver output at step {i}")
        y = C + g * dt
        if driver.depends_on_y:
            for _ in range(picard_max):
                g = np.asarray(driver(t, y, z, k), dtype=float)
                if not np.all(np.isfinite(g)):
                    raise RegressionError(f"non-finite driver output at step {i}")
                y_new = C + g * dt
                err = np.max(np.abs(y_new - y))
                y = y_new
                if err <= picard_tol * max(1.0, np.max(np.abs(y))):
                    break
            else:
                picard_fail.append(i)
        Y[:, i] = y
        Z[:, i] = z
        K[:, i, :] = k
    if rank_def:
        notes.append(f"rank-deficient bases truncated at {len(rank_def)} steps")
    if picard_fail:
        notes.append(f"fixed-point iteration hit the cap at steps {picard_fail[:5]}")
    se = float(Y[:, 1].std(ddof=1) / np.sqrt(n)) if n > 1 and last >= 1 else 0.0
    return BsdeSolution(grid, Y, Z, K, float(Y[:, 0].mean()), "regression", se, tuple(notes))


def solve_linear(params: LinearDriverParams, claim: Claim, paths: PathEnsemble,
                 basis_degree: int = 3, overflow_guard: float = 1e300) -> BsdeSolution:
    """Closed-form solution of the linear BSDE through its stochastic exponential.

    Y(t) = E[Gamma(T)/Gamma(t) F + int_t^T Gamma(s)/Gamma(t) phi(s) ds | F_t]
    with dGamma = Gamma(t-)[alpha dt + beta dB + sum_j gamma_j dÑ_j].
    Conditional expectations are regressions on the claim's Markov state.
    """
    grid = paths.grid
    params.validate(grid)
    N, dt, n, J = paths.n_steps, paths.dt, paths.n_paths, paths.n_atoms
    lam = paths.intensities
    notes = []
    gam = params.gamma_coef if params.gamma_coef else None
    G = stochastic_exponential(paths, params.alpha, params.beta, gam)
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("stochastic exponential overflowed")
    ratio = G.max() / G.min()
    if not np.isfinite(ratio) or ratio > overflow_guard:
        notes.append(f"ill-conditioned discount kernel: max/min ratio {ratio:.3g}")
    F = claim.values(paths)
    phi = step_coefficients(params.phi, grid)
    phi = np.broadcast_to(phi, (n, N))
    run = np.zeros((n, N + 1))
    # run[:, i] = sum_{m >= i} Gamma_m phi_m dt
    run[:, :N] = np.cumsum((G[:, :N] * phi * dt)[:, ::-1], axis=1)[:, ::-1]
    A = G[:, N:N + 1] * F[:, None] + run
    X = claim.markov_state(paths)
    Y = np.empty((n, N + 1))
    Z = np.zeros((n, N))
    K = np.zeros((n, N, J))
    Y[:, N] = F
    dNc = paths.compensated()
    for i in range(N - 1, -1, -1):
        P = Projector(X[:, i, :], basis_degree, step=i) if n > 1 else Projector(np.zeros((1, 1)), 0)
        target = A[:, i] / G[:, i]
        Y[:, i] = P(target)
        _, proj = _martingale_projections(P, Y[:, i + 1], paths.dB[:, i], dNc[:, i, :])
        Z[:, i] = proj[:, 0] / dt
        for j in range(J):
            if lam[j] > 0:
                K[:, i, j] = proj[:, 1 + j] / (lam[j] * dt)
    Y[:, 0] = A[:, 0].mean()
    se = float(A[:, 0].std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return BsdeSolution(grid, Y, Z, K, float(Y[0, 0]), "closed_form", se, tuple(notes))


@dataclass(frozen=True)
class ComparisonReport:
    max_diff: float
    location: tuple
    violated: bool
    tolerance: float

    def as_dict(self):
        return {"max_diff": self.max_diff, "location": list(self.location),
                "violated": self.violated, "tolerance": self.tolerance}


def check_comparison(sol1, sol2, tolerance=0.0) -> ComparisonReport:
    """Largest Y1 - Y2 over all paths/steps (or tree nodes); flag if > tolerance."""
    if hasattr(sol1, "levels") != hasattr(sol2, "levels"):
        raise ValueError("cannot compare a tree solution with a Monte Carlo solution")
    if hasattr(sol1, "levels"):
        if len(sol1.Y) != len(sol2.Y) or any(len(a) != len(b) for a, b in zip(sol1.Y, sol2.Y)):
            raise ValueError("mismatched trees")
        worst, loc = None, ()
        for lev, (a, b) in enumerate(zip(sol1.Y, sol2.Y)):
            d = a - b
            j = int(np.argmax(d.astype(float)))
            if worst is None or d[j] > worst:
                worst, loc = d[j], (lev, j)
        return ComparisonReport(float(worst), loc, bool(worst > tolerance), tolerance)
    if sol1.Y.shape != sol2.Y.shape or not np.array_equal(sol1.grid, sol2.grid):
        raise ValueError("mismatched grids")
    d = sol1.Y - sol2.Y
    idx = np.unravel_index(int(np.argmax(d)), d.shape)
    worst = float(d[idx])
    return ComparisonReport(worst, tuple(int(i) for i in idx), worst > tolerance, tolerance)

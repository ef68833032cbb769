"""Stochastic maximum principle for forward-backward control problems.

Controlled system (one-dimensional, decoupled):

    dX = b(t,X,u) dt + sigma(t,X,u) dB + sum_j gamma_j(t,X,u) dÑ_j,     X(0) = x0
    dY = -g(t,X,Y,Z,K,u) dt + Z dB + sum_j K_j dÑ_j,                    Y(T) = h(X(T))
    J(u) = E[ int_0^T f(t,X,u) dt + phi(X(T)) + psi(Y(0)) ]

with Hamiltonian H = f + g*lam + b*p + sigma*q + sum_j gamma_j r_j nu_j.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from ._util import Estimate, mc_mean, step_coefficients
from .bsde import Claim, Driver, Projector, solve_regression
from .market import (MarketModel, PathEnsemble, half_sharpe_integral, relative_entropy,
                     stochastic_exponential)


@dataclass(frozen=True)
class ControlProblem:
    """Coefficients of a decoupled forward-backward control problem.

    All coefficient functions act elementwise on arrays.  ``gamma`` has one
    function per jump atom; ``intensities`` are the atom rates nu_j.
    ``delay`` is the information lag: controls are adapted to F_{t-delay}.
    """

    b: Callable
    sigma: Callable
    x0: float = 1.0
    gamma: tuple = ()
    intensities: tuple = ()
    g: Callable | None = None          # g(t, x, y, z, k, u)
    f: Callable | None = None          # f(t, x, u)
    phi: Callable | None = None        # phi(x)
    psi: Callable | None = None        # psi(y)
    h: Callable | None = None          # h(x)
    control_set: tuple = (-np.inf, np.inf)
    delay: float = 0.0
    fd_step: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(self.gamma))
        object.__setattr__(self, "intensities", tuple(float(l) for l in self.intensities))
        if len(self.gamma) != len(self.intensities):
            raise ValueError("need one jump coefficient per atom intensity")
        lo, hi = self.control_set
        if not lo < hi:
            raise ValueError("empty control set")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")

    @property
    def has_backward(self) -> bool:
        return self.g is not None or self.h is not None or self.psi is not None

    def probe(self, n=64, seed=0, radius=2.0) -> bool:
        """Finite-value and finite-difference probes at random points."""
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 1, n)
        x = rng.uniform(0.1, radius, n)
        lo, hi = self.control_set
        u = rng.uniform(max(lo, -radius), min(hi, radius), n)
        y, z = rng.uniform(-radius, radius, (2, n))
        k = rng.uniform(-radius, radius, (n, len(self.intensities)))
        vals = [self.b(t, x, u), self.sigma(t, x, u)]
        vals += [gm(t, x, u) for gm in self.gamma]
        if self.g is not None:
            vals.append(self.g(t, x, y, z, k, u))
        if self.f is not None:
            vals.append(self.f(t, x, u))
        for fn, arg in ((self.phi, x), (self.h, x), (self.psi, y)):
            if fn is not None:
                vals.append(fn(arg))
                vals.append(_d(fn, arg, self.fd_step))
        return all(np.all(np.isfinite(np.asarray(v, dtype=float))) for v in vals)


def _d(fn, x, h):
    """Central difference of an elementwise function."""
    s = h * np.maximum(1.0, np.abs(x))
    return (fn(x + s) - fn(x - s)) / (2 * s)


@dataclass(frozen=True, eq=False)
class AdjointState:
    """Forward adjoint lam (n, N+1) and backward adjoints p (n, N+1), q (n, N), r (n, N, J)."""

    lam: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    notes: tuple = field(default=())


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Forward state and backward solution of a controlled system."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    u: np.ndarray
    J_samples: np.ndarray

    @property
    def J(self) -> Estimate:
        return mc_mean(self.J_samples)


def hamiltonian(point, control, adjoint, problem: ControlProblem):
    """H(t, x, y, z, k, u, lam, p, q, r) = f + g lam + b p + sigma q + sum_j gamma_j r_j nu_j.

    ``point`` is (t, x, y, z, k) with k of shape (..., J); ``adjoint`` is
    (lam, p, q, r) with r of shape (..., J).
    """
    t, x, y, z, k = point
    u = control
    lam, p, q, r = adjoint
    args = [np.asarray(a, dtype=float) for a in (x, y, z, u, lam, p, q)]
    if not all(np.all(np.isfinite(a)) for a in args):
        raise ValueError("non-finite argument to the Hamiltonian")
    H = problem.b(t, x, u) * p + problem.sigma(t, x, u) * q
    if problem.f is not None:
        H = H + problem.f(t, x, u)
    if problem.g is not None:
        H = H + problem.g(t, x, y, z, k, u) * lam
    r = np.asarray(r, dtype=float)
    for j, gm in enumerate(problem.gamma):
        H = H + gm(t, x, u) * r[..., j] * problem.intensities[j]
    return H


def _control_array(u, paths: PathEnsemble, problem: ControlProblem):
    arr = np.broadcast_to(step_coefficients(u, paths.grid), (paths.n_paths, paths.n_steps)).astype(float)
    lo, hi = problem.control_set
    if not np.all(np.isfinite(arr)) or np.any(arr < lo) or np.any(arr > hi):
        raise ValueError(f"control leaves the admissible set [{lo}, {hi}]")
    return arr


def simulate_state(problem: ControlProblem, u, paths: PathEnsemble) -> np.ndarray:
    """Euler scheme for the controlled forward state, shape (n, N+1)."""
    uu = _control_array(u, paths, problem)
    n, N = uu.shape
    grid, dt = paths.grid, paths.dt
    dNc = paths.compensated()
    X = np.empty((n, N + 1))
    X[:, 0] = problem.x0
    for i in range(N):
        t, x, ui = grid[i], X[:, i], uu[:, i]
        dx = problem.b(t, x, ui) * dt + problem.sigma(t, x, ui) * paths.dB[:, i]
        for j, gm in enumerate(problem.gamma):
            dx = dx + gm(t, x, ui) * dNc[:, i, j]
        X[:, i + 1] = x + dx
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("forward state is not finite")
    return X


def _state_with(paths, X):
    return np.concatenate([paths.noise_state(), X[:, :, None]], axis=2)


def _pathwise_driver(fn, label):
    # Driver whose coefficients are per-path arrays indexed by grid step.
    return Driver(fn, 0.0, (), True, False, label=label)


def evaluate(problem: ControlProblem, u, paths: PathEnsemble, basis_degree=2) -> Trajectory:
    """Simulate X, solve the backward equation and return per-path performance."""
    uu = _control_array(u, paths, problem)
    X = simulate_state(problem, uu, paths)
    n, N = uu.shape
    J = paths.n_atoms
    dt = paths.dt
    if problem.has_backward:
        gfun = problem.g
        hfun = problem.h if problem.h is not None else (lambda x: 0.0 * x)
        state = _state_with(paths, X)

        def g(t, y, z, k):
            i = min(int(round(t / dt)), N - 1)
            if gfun is None:
                return 0.0 * y
            return gfun(t, X[:, i], y, z, k, uu[:, i])

        sol = solve_regression(_pathwise_driver(g, "controlled"),
                               Claim(lambda p: hfun(X[:, -1]), lambda p: state),
                               paths, basis_degree, check_driver=False)
        Y, Z, K = sol.Y, sol.Z, sol.K
        Y0 = sol.Y0
    else:
        Y = np.zeros((n, N + 1))
        Z = np.zeros((n, N))
        K = np.zeros((n, N, J))
        Y0 = 0.0
    Js = np.zeros(n)
    if problem.f is not None:
        for i in range(N):
            Js += problem.f(paths.grid[i], X[:, i], uu[:, i]) * dt
    if problem.phi is not None:
        Js += problem.phi(X[:, -1])
    if problem.psi is not None:
        Js += problem.psi(Y0)
    return Trajectory(X, Y, Z, K, uu, Js)


def adjoints(problem: ControlProblem, traj: Trajectory, paths: PathEnsemble, basis_degree=2) -> AdjointState:
    """Forward lam and backward (p, q, r) along a trajectory.

    dlam = H_y dt + H_z dB + sum_j (H_kj / nu_j) dÑ_j,  lam(0) = psi'(Y(0));
    dp = -H_x dt + q dB + sum_j r_j dÑ_j,             p(T) = phi'(X(T)) + lam(T) h'(X(T)).
    Partial derivatives of the coefficients are central differences.
    """
    X, Y, Z, K, uu = traj.X, traj.Y, traj.Z, traj.K, traj.u
    n, N = uu.shape
    J = paths.n_atoms
    grid, dt = paths.grid, paths.dt
    nu = np.asarray(problem.intensities, dtype=float)
    hs = problem.fd_step
    dNc = paths.compensated()

    lam = np.zeros((n, N + 1))
    if problem.psi is not None:
        lam[:, 0] = _d(problem.psi, np.full(n, Y[:, 0].mean()), hs)
    if problem.g is not None:
        for i in range(N):
            t = grid[i]
            x, y, z, k, u = X[:, i], Y[:, i], Z[:, i], K[:, i], uu[:, i]
            gy = _d(lambda v: problem.g(t, x, v, z, k, u), y, hs)
            gz = _d(lambda v: problem.g(t, x, y, v, k, u), z, hs)
            dl = gy * dt + gz * paths.dB[:, i]
            for j in range(J):
                if nu[j] > 0:
                    def gk(v, j=j):
                        kk = k.copy()
                        kk[:, j] = v
                        return problem.g(t, x, y, z, kk, u)
                    dl = dl + _d(gk, k[:, j], hs) / nu[j] * dNc[:, i, j]
            lam[:, i + 1] = lam[:, i] * (1.0 + dl)

    # H_x = A0 + A1 p + A2 q + sum_j A3_j r_j  (H is affine in the adjoints)
    A0 = np.zeros((n, N))
    A1 = np.zeros((n, N))
    A2 = np.zeros((n, N))
    A3 = np.zeros((n, N, J))
    for i in range(N):
        t = grid[i]
        x, u = X[:, i], uu[:, i]
        A1[:, i] = _d(lambda v: problem.b(t, v, u), x, hs)
        A2[:, i] = _d(lambda v: problem.sigma(t, v, u), x, hs)
        for j, gm in enumerate(problem.gamma):
            A3[:, i, j] = _d(lambda v: gm(t, v, u), x, hs) * nu[j]
        if problem.f is not None:
            A0[:, i] += _d(lambda v: problem.f(t, v, u), x, hs)
        if problem.g is not None:
            y, z, k = Y[:, i], Z[:, i], K[:, i]
            A0[:, i] += lam[:, i] * _d(lambda v: problem.g(t, v, y, z, k, u), x, hs)

    pT = np.zeros(n)
    if problem.phi is not None:
        pT += _d(problem.phi, X[:, -1], hs)
    if problem.h is not None:
        pT += lam[:, -1] * _d(problem.h, X[:, -1], hs)

    def gp(t, p, q, r):
        i = min(int(round(t / dt)), N - 1)
        out = A0[:, i] + A1[:, i] * p + A2[:, i] * q
        for j in range(J):
            out = out + A3[:, i, j] * r[:, j]
        return out

    state = _state_with(paths, X)
    sol = solve_regression(_pathwise_driver(gp, "adjoint"), Claim(lambda _: pT, lambda _: state),
                           paths, basis_degree, check_driver=False)
    return AdjointState(lam, sol.Y, sol.Z, sol.K, sol.notes)


@dataclass(frozen=True, eq=False)
class NecessaryReport:
    """Finite-difference and adjoint estimates of the Gâteaux derivative."""

    dJ: Estimate
    adjoint_dJ: Estimate
    dH_du: np.ndarray          # E[dH/du | G_t] per path and step, (n, N)
    dH_du_mean: np.ndarray     # per-step mean, (N,)
    dH_du_stderr: np.ndarray   # per-step standard error, (N,)

    def as_dict(self):
        return {"dJ": self.dJ.as_dict(), "adjoint_dJ": self.adjoint_dJ.as_dict(),
                "dH_du_mean": self.dH_du_mean.tolist(), "dH_du_stderr": self.dH_du_stderr.tolist()}


def check_necessary(problem: ControlProblem, u, perturbation, paths: PathEnsemble,
                    h_fd: float = 1e-3, basis_degree: int = 2, adjoint=True) -> NecessaryReport:
    """Central difference of J(u + a*beta) at a = 0 with common random numbers.

    Also returns E[dH/du(t) | G_t] (regression on the state delayed by the
    information lag) and the adjoint form E[int dH/du * beta dt].
    """
    uu = _control_array(u, paths, problem)
    beta = np.broadcast_to(step_coefficients(perturbation, paths.grid), uu.shape).astype(float)
    if not np.all(np.isfinite(beta)):
        raise ValueError("perturbation is not finite")
    up = _control_array(uu + h_fd * beta, paths, problem)
    um = _control_array(uu - h_fd * beta, paths, problem)
    Jp = evaluate(problem, up, paths, basis_degree).J_samples
    Jm = evaluate(problem, um, paths, basis_degree).J_samples
    dJ = mc_mean((Jp - Jm) / (2 * h_fd))

    n, N = uu.shape
    if not adjoint:
        nanN = np.full(N, np.nan)
        return NecessaryReport(dJ, Estimate(np.nan, np.nan, 0), np.zeros((n, N)), nanN, nanN)
    traj = evaluate(problem, uu, paths, basis_degree)
    adj = adjoints(problem, traj, paths, basis_degree)
    grid, dt = paths.grid, paths.dt
    lag = int(round(problem.delay / dt))
    state = _state_with(paths, traj.X)
    dH = np.zeros((n, N))
    cond = np.zeros((n, N))
    for i in range(N):
        pt = (grid[i], traj.X[:, i], traj.Y[:, i], traj.Z[:, i], traj.K[:, i])
        ad = (adj.lam[:, i], adj.p[:, i], adj.q[:, i], adj.r[:, i])
        dH[:, i] = _d(lambda v: hamiltonian(pt, v, ad, problem), uu[:, i], problem.fd_step)
        P = Projector(state[:, max(0, i - lag), :], basis_degree, step=i)
        cond[:, i] = P(dH[:, i])
    adj_dJ = mc_mean((dH * beta).sum(axis=1) * dt)
    se = dH.std(axis=0, ddof=1) / np.sqrt(n)
    return NecessaryReport(dJ, adj_dJ, cond, dH.mean(axis=0), se)


# --------------------------------------------------------------------------- utility

@dataclass(frozen=True)
class LogUtility:
    def U(self, x):
        return np.log(x)

    def I(self, y):
        """Inverse marginal utility (U')^{-1}."""
        return 1.0 / y


@dataclass(frozen=True)
class PowerUtility:
    """U(x) = x^delta / delta with delta < 1, delta != 0."""

    delta: float = 0.5

    def __post_init__(self):
        if not (self.delta < 1 and self.delta != 0):
            raise ValueError("power utility needs delta < 1, delta != 0")

    def U(self, x):
        return x ** self.delta / self.delta

    def I(self, y):
        return y ** (1.0 / (self.delta - 1.0))


def _require_no_jumps(market: MarketModel):
    if market.has_jumps:
        raise ValueError("this problem is set in a continuous market (no jump atoms)")


def state_price_density(market: MarketModel, paths: PathEnsemble) -> np.ndarray:
    """Gamma with dGamma = Gamma(-r dt - ((mu - r)/sigma) dB), Gamma(0) = 1."""
    th = lambda t: -market.price_of_risk(t)
    r = market.r
    alpha = (lambda t: -np.asarray(r(t))) if callable(r) else -float(r)
    return stochastic_exponential(paths, alpha, th)


def _gamma_moment(market: MarketModel, q: float) -> float:
    # E[Gamma(T)^q] for deterministic coefficients
    v = 2.0 * half_sharpe_integral(market)
    if callable(market.r):
        from scipy.integrate import quad
        rT = quad(lambda t: float(market.r(t)), 0.0, market.T)[0]
    else:
        rT = float(market.r) * market.T
    return float(np.exp(-q * rT + 0.5 * q * (q - 1.0) * v))


@dataclass(frozen=True, eq=False)
class UtilityResult:
    c: float
    c_analytic: float
    X_T: np.ndarray
    Gamma_T: np.ndarray
    budget: Estimate
    expected_utility: Estimate
    pi_hat: float | None

    def as_dict(self):
        return {"c": self.c, "c_analytic": self.c_analytic, "budget": self.budget.as_dict(),
                "expected_utility": self.expected_utility.as_dict(), "pi_hat": self.pi_hat}


def utility_optimize(utility, market: MarketModel, x0: float, paths: PathEnsemble,
                     tol: float = 1e-10) -> UtilityResult:
    """Optimal terminal wealth X(T) = I(c Gamma(T)) with x0 = E[I(c Gamma(T)) Gamma(T)].

    c is found by bisection in log c on the sample equation; the closed
    form through lognormal moments of Gamma(T) is returned alongside.
    """
    _require_no_jumps(market)
    if x0 <= 0:
        raise ValueError("initial wealth must be positive")
    G = state_price_density(market, paths)[:, -1]

    def excess(logc):
        return float(np.mean(utility.I(np.exp(logc) * G) * G)) - x0

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if excess(lo) > 0 > excess(hi):
            break
        lo, hi = lo - 2.0, hi + 2.0
    else:
        raise RuntimeError(f"no sign change for the budget equation on [{lo}, {hi}]")
    logc = brentq(excess, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)
    c = float(np.exp(logc))
    if isinstance(utility, LogUtility):
        c_an = 1.0 / x0
    else:
        d = utility.delta
        c_an = (x0 / _gamma_moment(market, d / (d - 1.0))) ** (d - 1.0)
    pi_hat = None
    if not callable(market.mu) and not callable(market.sigma) and not callable(market.r):
        k = 1.0 if isinstance(utility, LogUtility) else 1.0 / (1.0 - utility.delta)
        pi_hat = k * (float(market.mu) - float(market.r)) / float(market.sigma) ** 2
    XT = utility.I(c * G)
    return UtilityResult(c, float(c_an), XT, G, mc_mean(G * XT), mc_mean(utility.U(XT)), pi_hat)


def constant_fraction_wealth(market: MarketModel, pi, x0: float, paths: PathEnsemble) -> np.ndarray:
    """Euler scheme for dX = X[(r + pi(mu - r)) dt + pi sigma dB], shape (n, N+1)."""
    _require_no_jumps(market)
    grid, dt = paths.grid, paths.dt
    mu = step_coefficients(market.mu, grid)
    sg = step_coefficients(market.sigma, grid)
    r = step_coefficients(market.r, grid)
    gross = 1.0 + (r + pi * (mu - r)) * dt + pi * sg * paths.dB
    X = np.empty((paths.n_paths, paths.n_steps + 1))
    X[:, 0] = x0
    np.cumprod(gross, axis=1, out=X[:, 1:])
    X[:, 1:] *= x0
    return X


def wealth_problem(market: MarketModel, x0: float, utility) -> ControlProblem:
    """Portfolio problem with the fraction of wealth in the risky asset as control."""
    _require_no_jumps(market)
    mu, sg, r = market.mu, market.sigma, market.r
    cv = lambda c, t: c(t) if callable(c) else c
    return ControlProblem(
        b=lambda t, x, u: x * (cv(r, t) + u * (cv(mu, t) - cv(r, t))),
        sigma=lambda t, x, u: u * cv(sg, t) * x,
        x0=x0, phi=utility.U)


# --------------------------------------------------------------------------- risk minimization

@dataclass(frozen=True, eq=False)
class RiskMinResult:
    value_analytic: float
    value_mc: Estimate | None
    Z_hat: np.ndarray       # optimal Z on the grid steps
    w_hat: np.ndarray       # optimal amount in the risky asset per step
    entropy: float

    def as_dict(self):
        return {"value_analytic": self.value_analytic,
                "value_mc": None if self.value_mc is None else self.value_mc.as_dict(),
                "Z_hat": self.Z_hat.tolist(), "w_hat": self.w_hat.tolist(), "entropy": self.entropy}


def risk_minimize_quadratic(market: MarketModel, x0: float, paths: PathEnsemble | None = None) -> RiskMinResult:
    """Minimal entropic risk over self-financing portfolios.

    With g(z) = -z^2/2 the optimal Z is b0/sigma0 and the minimal risk is
    -x0 - E_Q[log M(T)] with dQ = M(T) dP, M the Girsanov density of
    theta0 = -b0/sigma0; analytically -x0 - int 0.5 (b0/sigma0)^2 dt.
    """
    _require_no_jumps(market)
    grid = market.grid
    th = market.price_of_risk(grid[:-1])
    sg = np.broadcast_to(market.sigma(grid[:-1]) if callable(market.sigma) else float(market.sigma), th.shape)
    ent = half_sharpe_integral(market)
    val = -float(x0) - ent
    mc = None
    if paths is not None:
        M = stochastic_exponential(paths, 0.0, lambda t: -market.price_of_risk(t))[:, -1]
        H = relative_entropy(M)
        mc = Estimate(-float(x0) - H.value, H.stderr, H.n)
    return RiskMinResult(val, mc, th.copy(), th / sg, ent)


def induced_claim(market: MarketModel, x0: float) -> Claim:
    """Terminal wealth x0 + int w_hat dS/S of the risk-minimizing portfolio."""
    _require_no_jumps(market)

    def payoff(p):
        grid = p.grid
        th = np.broadcast_to(market.price_of_risk(grid[:-1]), (p.n_steps,))
        mu = step_coefficients(market.mu, grid)
        r = step_coefficients(market.r, grid)
        sg = step_coefficients(market.sigma, grid)
        w = th / sg
        return x0 + ((w * (mu - r)) * p.dt + w * sg * p.dB).sum(axis=1)

    return Claim(payoff, label="risk-minimizing wealth")

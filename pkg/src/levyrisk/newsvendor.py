"""Leader-follower (Stackelberg) newsvendor game with Gaussian demand.

Deterministic reduction: given the information available when ordering,
demand at time t is Gaussian with known mean m_t and standard deviation
sbar_t.  The follower's first-order system becomes a backward ODE for
Y_t = E[min(X_t, Q_t)], and the leader's price solves a pointwise
first-order condition coupled to a forward adjoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from ._util import Curve, curve_values, write_csv

_SQRT2PI = np.sqrt(2.0 * np.pi)


class BracketError(RuntimeError):
    pass


class FixedPointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NewsvendorSpec:
    """Demand intercept K, production cost M, salvage price S, demand noise
    sigma, delivery delay delta and horizon T.

    The conditional demand law at t is N(mean(t), sbar(t)^2); sbar defaults
    to sigma * sqrt(delta).
    """

    K: float = 20.0
    M: float = 4.0
    S: float = 1.0
    sigma: float = 4.0
    delta: float = 0.25
    T: float = 1.0
    mean: Curve = 10.0
    sbar: Curve | None = None
    n_steps: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.S < self.M < self.K):
            raise ValueError("need salvage S < cost M < demand intercept K")
        if not (0 <= self.delta < self.T):
            raise ValueError("need 0 <= delta < T")
        if self.n_steps < 2:
            raise ValueError("need at least two steps")
        if np.any(self.sd(self.grid) <= 0):
            raise ValueError("demand standard deviation must be positive")
        for v in (self.K, self.M, self.S, self.sigma, self.T):
            if not np.isfinite(v):
                raise ValueError("parameters must be finite")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.delta, self.T, self.n_steps + 1)

    def m(self, t):
        return curve_values(self.mean, t)

    def sd(self, t):
        if self.sbar is None:
            return np.full(np.shape(t), self.sigma * np.sqrt(self.delta)) if np.ndim(t) \
                else np.asarray(self.sigma * np.sqrt(self.delta))
        return curve_values(self.sbar, t)


def h_and_f(spec: NewsvendorSpec, t, x):
    """h_t(x) = P(X_t <= x), f_t(x) = E[X_t; X_t <= x] for Gaussian demand."""
    m, s = spec.m(t), spec.sd(t)
    z = (np.asarray(x, dtype=float) - m) / s
    h = ndtr(z)
    return h, m * h - s * np.exp(-0.5 * z * z) / _SQRT2PI


def h_inverse(spec, t, p):
    return spec.m(t) + spec.sd(t) * ndtri(p)


def expected_sales(spec, t, Q):
    """E[min(X_t, Q)] = Q (1 - h(Q)) + f(Q)."""
    h, f = h_and_f(spec, t, Q)
    return Q * (1.0 - h) + f


def order_quantity(spec, t, w, margin):
    """Q = h^{-1}(y / (y + w - S)) for retail margin y = R - w."""
    return h_inverse(spec, t, margin / (margin + w - spec.S))


def F(spec, t, w, margin):
    """F_t(w, y) = Q (w - S)/(y + w - S) + f_t(Q) with Q = order_quantity(y)."""
    Q = order_quantity(spec, t, w, margin)
    _, f = h_and_f(spec, t, Q)
    return Q * (w - spec.S) / (margin + w - spec.S) + f


def F_inverse(spec, t, w, Y, rtol=1e-13, max_iter=400):
    """Margin y > 0 with F_t(w, y) = Y, by vectorized bisection in log y.

    F is increasing in y; the bracket starts at [1e-30, K] and is widened
    geometrically until it contains the root.
    """
    if np.ndim(t) == 0 and np.ndim(w) == 0 and np.ndim(Y) == 0:
        return _F_inverse_scalar(spec, float(t), float(w), float(Y), rtol, max_iter)
    t, w, Y = np.broadcast_arrays(np.asarray(t, float), np.asarray(w, float), np.asarray(Y, float))
    if np.any(w <= spec.S):
        raise ValueError("price must exceed the salvage value")
    lo = np.full(t.shape, np.log(1e-30))
    hi = np.full(t.shape, np.log(spec.K))
    for _ in range(60):
        bad_lo = F(spec, t, w, np.exp(lo)) > Y
        bad_hi = F(spec, t, w, np.exp(hi)) < Y
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, lo - 23.0, lo)
        hi = np.where(bad_hi, hi + 2.3, hi)
    else:
        i = int(np.flatnonzero((F(spec, t, w, np.exp(lo)) > Y) | (F(spec, t, w, np.exp(hi)) < Y))[0])
        raise BracketError(f"no bracket for F^-1 at t={t.flat[i]!r}, w={w.flat[i]!r}, Y={Y.flat[i]!r}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        up = F(spec, t, w, np.exp(mid)) < Y
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
        if np.all(hi - lo <= rtol):
            break
    return np.exp(0.5 * (lo + hi))


def _F_inverse_scalar(spec, t, w, Y, rtol, max_iter):
    # Same bisection as F_inverse with scalar math (hot path of the ODE solver).
    if w <= spec.S:
        raise ValueError("price must exceed the salvage value")
    m, sd, S = float(spec.m(t)), float(spec.sd(t)), spec.S
    c = w - S

    def Fs(ly):
        y = math.exp(ly)
        Q = m + sd * float(ndtri(y / (y + c)))
        z = (Q - m) / sd
        h = 0.5 * math.erfc(-z / math.sqrt(2.0))
        return Q * c / (y + c) + m * h - sd * math.exp(-0.5 * z * z) / _SQRT2PI

    lo, hi = math.log(1e-30), math.log(spec.K)
    for _ in range(60):
        bl, bh = Fs(lo) > Y, Fs(hi) < Y
        if not (bl or bh):
            break
        lo -= 23.0 * bl
        hi += 2.3 * bh
    else:
        raise BracketError(f"no bracket for F^-1 at t={t!r}, w={w!r}, Y={Y!r}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if Fs(mid) < Y:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol:
            break
    return math.exp(0.5 * (lo + hi))


def _price_curve(spec, w):
    g = spec.grid
    if callable(w):
        wg = curve_values(w, g)
        return wg, (lambda t: curve_values(w, t))
    wg = np.broadcast_to(np.asarray(w, dtype=float), g.shape).copy()
    return wg, (lambda t: np.interp(t, g, wg))


@dataclass(frozen=True, eq=False)
class FollowerResponse:
    t: np.ndarray
    w: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Y: np.ndarray

    @property
    def margin(self):
        return self.R - self.w


def follower_response(spec: NewsvendorSpec, w) -> FollowerResponse:
    """Optimal order Q and retail price R for the price curve w.

    Y solves Y' = -F^{-1}(w, Y), Y(T) = 0, integrated backwards by RK4
    with w interpolated at midpoints; then R = w + F^{-1}(w, Y) and
    Q = h^{-1}(F^{-1}/(F^{-1} + w - S)).
    """
    g = spec.grid
    wg, wf = _price_curve(spec, w)
    if np.any(wg <= spec.S) or np.any(wg > spec.K):
        raise ValueError("price must lie in (S, K]")
    N = g.size - 1
    Y = np.zeros(N + 1)
    for n in range(N - 1, -1, -1):
        t1, t0 = g[n + 1], g[n]
        h = t1 - t0
        tm = 0.5 * (t0 + t1)
        y = Y[n + 1]
        k1 = F_inverse(spec, t1, wf(t1), y)
        k2 = F_inverse(spec, tm, wf(tm), y + 0.5 * h * k1)
        k3 = F_inverse(spec, tm, wf(tm), y + 0.5 * h * k2)
        k4 = F_inverse(spec, t0, wf(t0), y + h * k3)
        Y[n] = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    y = F_inverse(spec, g, wg, Y)
    Q = order_quantity(spec, g, wg, y)
    return FollowerResponse(g, wg, Q, wg + y, Y)


def leader_profit(spec: NewsvendorSpec, w, response: FollowerResponse | None = None) -> float:
    """int_delta^T (w - M) Q(w) dt by the trapezoid rule on the grid."""
    r = follower_response(spec, w) if response is None else response
    return float(np.trapezoid((r.w - spec.M) * r.Q, r.t))


# --------------------------------------------------------------------------- leader

def _Q_of(spec, t, w, Y):
    return order_quantity(spec, t, w, F_inverse(spec, t, w, Y))


def leader_hamiltonian(spec, t, w, Y, lam):
    """(w - M) Q(w, Y) + lam F^{-1}(w, Y) + (K - w - F^{-1}) p + sigma q with p = q = 0."""
    y = F_inverse(spec, t, w, Y)
    return (w - spec.M) * order_quantity(spec, t, w, y) + lam * y


def price_condition(spec, t, w, Y, lam, dw=None):
    """(w - M) dQ/dw + Q + lam dF^{-1}/dw, derivatives by central differences."""
    h = 1e-5 * (spec.K - spec.S) if dw is None else dw
    dQ = (_Q_of(spec, t, w + h, Y) - _Q_of(spec, t, w - h, Y)) / (2 * h)
    dFi = (F_inverse(spec, t, w + h, Y) - F_inverse(spec, t, w - h, Y)) / (2 * h)
    return (w - spec.M) * dQ + _Q_of(spec, t, w, Y) + lam * dFi


def _dH_dy(spec, t, w, Y, lam):
    hY = 1e-6 * np.maximum(1.0, np.abs(Y))
    return (leader_hamiltonian(spec, t, w, Y + hY, lam) - leader_hamiltonian(spec, t, w, Y - hY, lam)) / (2 * hY)


def leader_adjoint(spec, resp: FollowerResponse) -> np.ndarray:
    """lam' = dH/dy (affine in lam), lam(delta) = 0, by Heun's method."""
    t, w, Y = resp.t, resp.w, resp.Y
    a = _dH_dy(spec, t, w, Y, 0.0)
    b = _dH_dy(spec, t, w, Y, 1.0) - a
    lam = np.zeros_like(t)
    for n in range(t.size - 1):
        h = t[n + 1] - t[n]
        k1 = a[n] + b[n] * lam[n]
        k2 = a[n + 1] + b[n + 1] * (lam[n] + h * k1)
        lam[n + 1] = lam[n] + 0.5 * h * (k1 + k2)
    return lam


def best_price(spec, t, Y, lam, tol=1e-12):
    """Root of the price condition on [M, K] at every grid point.

    Where the condition has no sign change the endpoint with the larger
    Hamiltonian is returned.  Returns (w, root_found).
    """
    t, Y, lam = np.broadcast_arrays(np.asarray(t, float), np.asarray(Y, float), np.asarray(lam, float))
    lo = np.full(t.shape, spec.M)
    hi = np.full(t.shape, spec.K)
    flo = price_condition(spec, t, lo, Y, lam)
    fhi = price_condition(spec, t, hi, Y, lam)
    found = flo * fhi <= 0
    Hl = leader_hamiltonian(spec, t, lo, Y, lam)
    Hh = leader_hamiltonian(spec, t, hi, Y, lam)
    corner = np.where(Hh >= Hl, hi, lo)
    if found.any():
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = price_condition(spec, t, mid, Y, lam)
            left = flo * fm <= 0
            hi = np.where(left, mid, hi)
            lo = np.where(left, lo, mid)
            flo = np.where(left, flo, fm)
            if np.all((hi - lo)[found] <= tol * spec.K):
                break
    return np.where(found, 0.5 * (lo + hi), corner), found


@dataclass(frozen=True, eq=False)
class StackelbergSolution:
    t: np.ndarray
    w: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Y: np.ndarray
    lam: np.ndarray
    root_found: np.ndarray
    sweeps: int
    history: tuple = ()
    notes: tuple = field(default=())

    @property
    def response(self) -> FollowerResponse:
        return FollowerResponse(self.t, self.w, self.Q, self.R, self.Y)

    def to_csv(self, path):
        write_csv(path, ["t", "w", "Q", "R", "Y", "lambda"],
                  [self.t, self.w, self.Q, self.R, self.Y, self.lam])

    def as_dict(self):
        return {"t": self.t.tolist(), "w": self.w.tolist(), "Q": self.Q.tolist(), "R": self.R.tolist(),
                "Y": self.Y.tolist(), "lambda": self.lam.tolist(), "sweeps": self.sweeps,
                "root_found_fraction": float(np.mean(self.root_found)), "notes": list(self.notes)}


def leader_price(spec: NewsvendorSpec, w0=None, damping=0.5, tol=1e-8, max_sweeps=200) -> StackelbergSolution:
    """Fixed point of w -> (Y, lam) -> w solving the price condition pointwise."""
    g = spec.grid
    w = np.full(g.shape, 0.5 * (spec.M + spec.K)) if w0 is None else np.broadcast_to(w0, g.shape).astype(float)
    history = []
    for sweep in range(1, max_sweeps + 1):
        resp = follower_response(spec, w)
        lam = leader_adjoint(spec, resp)
        new, found = best_price(spec, g, resp.Y, lam)
        step = float(np.max(np.abs(new - w)))
        history.append(step)
        w = w + damping * (new - w) if step > tol else new
        if step <= tol:
            resp = follower_response(spec, w)
            lam = leader_adjoint(spec, resp)
            notes = []
            if not found.all():
                notes.append(f"price condition has no root in [M, K] at {int((~found).sum())} of "
                             f"{found.size} grid points; the Hamiltonian-maximizing endpoint is used")
            return StackelbergSolution(g, w, resp.Q, resp.R, resp.Y, lam, found, sweep,
                                       tuple(history), tuple(notes))
    raise FixedPointError(f"no convergence after {max_sweeps} sweeps; step history tail {history[-5:]}")


# --------------------------------------------------------------------------- residuals

def residual_first_order(spec, resp: FollowerResponse) -> np.ndarray:
    """h_t(Q) - (R - w)/(R - S) on the grid."""
    h, _ = h_and_f(spec, resp.t, resp.Q)
    return h - (resp.R - resp.w) / (resp.R - spec.S)


def _tail_integral(t, v):
    # int_t^T v ds on the grid by the trapezoid rule
    seg = 0.5 * (v[1:] + v[:-1]) * np.diff(t)
    out = np.zeros_like(t)
    out[:-1] = np.cumsum(seg[::-1])[::-1]
    return out


def residual_sales_condition(spec, resp: FollowerResponse) -> np.ndarray:
    """E[min(X_t, Q_t)] - int_t^T E[(R_s - X_s); X_s <= Q_s] ds on the grid."""
    h, f = h_and_f(spec, resp.t, resp.Q)
    return expected_sales(spec, resp.t, resp.Q) - _tail_integral(resp.t, resp.R * h - f)


def residual_integral_form(spec, resp: FollowerResponse) -> np.ndarray:
    """Y_t - int_t^T F^{-1}(w_s, Y_s) ds (trapezoid re-quadrature)."""
    return resp.Y - _tail_integral(resp.t, resp.margin)


def residual_price_condition(spec, sol: StackelbergSolution) -> np.ndarray:
    return price_condition(spec, sol.t, sol.w, sol.Y, sol.lam)


def price_shift_profits(spec, sol: StackelbergSolution, shifts=(-0.25, 0.25)):
    """Leader profit at w_hat + c for each shift c; inadmissible shifts are flagged."""
    base = leader_profit(spec, sol.w, sol.response)
    out = {"base": base, "shifts": []}
    for c in shifts:
        ws = sol.w + c
        ok = bool(np.all(ws > spec.S) and np.all(ws <= spec.K))
        val = leader_profit(spec, ws) if ok else None
        out["shifts"].append({"shift": c, "admissible": ok, "profit": val,
                              "dominated": None if val is None else bool(val <= base)})
    return out

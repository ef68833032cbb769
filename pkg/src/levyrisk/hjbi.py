"""Entropic zero-sum game: generator, first-order conditions, HJBI verification.

State y = (s, x, m): wealth x with amount w in the risky asset and the
scenario density m,

    dX = w [mu ds + sigma dB + sum_j gamma_j dÑ_j],
    dM = M [theta0 dB + sum_j theta1_j dÑ_j].

The market player picks theta to maximize E[-X(T)M(T) - M(T) log M(T)],
the investor picks w to minimize it.  The candidate value function

    phi(s, x, m) = -x m - m log m + kappa(s) m

reduces the generator to m times a function of the controls.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .market import MarketModel, half_sharpe_integral


def _cv(c, s):
    return np.asarray(c(s), dtype=float) if callable(c) else np.asarray(float(c))


@dataclass(frozen=True)
class GameSpec:
    market: MarketModel

    @property
    def n_atoms(self) -> int:
        return self.market.n_atoms

    def coefficients(self, s):
        """(mu, sigma, gamma (J,), nu (J,)) at time s."""
        m = self.market
        gam = np.array([float(_cv(a.gamma, s)) for a in m.atoms])
        return float(_cv(m.mu, s)), float(_cv(m.sigma, s)), gam, m.intensities

    @staticmethod
    def check_point(x, m):
        if np.any(np.asarray(m) <= 0) or np.any(np.asarray(x) <= 0):
            raise ValueError("evaluation points need x > 0 and m > 0")


def terminal_value(x, m):
    """-x m - m log m."""
    return -x * m - m * np.log(m)


@dataclass(frozen=True)
class CandidateValue:
    """Candidate value function with its partial derivatives.

    ``partials(s, x, m)`` returns a dict with keys s, x, xx, m, mm, xm.  When
    omitted, partials are central finite differences of ``phi``.
    """

    phi: Callable
    partials: Callable | None = None
    kappa: Callable | None = None
    fd_step: float = 1e-4
    label: str = ""

    @classmethod
    def ansatz(cls, kappa: Callable, kappa_prime: Callable, label="ansatz"):
        """phi = -x m - m log m + kappa(s) m with analytic partials."""

        def phi(s, x, m):
            return -x * m - m * np.log(m) + kappa(s) * m

        def partials(s, x, m):
            one = np.ones_like(np.asarray(x * m, dtype=float))
            return {"s": kappa_prime(s) * m, "x": -m * one, "xx": 0.0 * one,
                    "m": (-x - np.log(m) - 1.0 + kappa(s)) * one, "mm": -1.0 / m * one,
                    "xm": -1.0 * one}

        return cls(phi, partials, kappa, label=label)

    @classmethod
    def closed_form(cls, spec: GameSpec):
        """kappa(s) = -int_s^T 0.5 (mu/sigma)^2 dt."""
        mk = spec.market

        def kappa(s):
            s = np.asarray(s, dtype=float)
            return -np.vectorize(lambda v: half_sharpe_integral(mk, float(v)))(s) if s.ndim else \
                -half_sharpe_integral(mk, float(s))

        def kappa_prime(s):
            return 0.5 * np.asarray(mk.price_of_risk(s), dtype=float) ** 2

        return cls.ansatz(kappa, kappa_prime, label="closed-form")

    @classmethod
    def from_controls(cls, spec: GameSpec, controls: "GameControls"):
        """Ansatz with kappa' chosen so the reduced generator vanishes at ``controls``.

        Uses the exact jump term; constant coefficients only.
        """
        mk = spec.market
        if any(callable(c) for c in (mk.mu, mk.sigma)) or any(callable(a.gamma) for a in mk.atoms):
            raise ValueError("constant coefficients required")
        rate = -float(reduced_generator(spec, 0.0, 1.0, controls.as_tuple(), 0.0, "exact"))
        T = mk.T
        return cls.ansatz(lambda s: -rate * (T - np.asarray(s, dtype=float)),
                          lambda s: rate + 0.0 * np.asarray(s, dtype=float), label="saddle-ansatz")

    def derivatives(self, s, x, m):
        if self.partials is not None:
            return self.partials(s, x, m)
        f = self.phi
        h = self.fd_step
        hx = h * np.maximum(1.0, np.abs(x))
        hm = h * np.maximum(1.0, np.abs(m))
        hm = np.minimum(hm, 0.5 * m)
        f0 = f(s, x, m)
        return {
            "s": (f(s + h, x, m) - f(s - h, x, m)) / (2 * h),
            "x": (f(s, x + hx, m) - f(s, x - hx, m)) / (2 * hx),
            "xx": (f(s, x + hx, m) - 2 * f0 + f(s, x - hx, m)) / hx ** 2,
            "m": (f(s, x, m + hm) - f(s, x, m - hm)) / (2 * hm),
            "mm": (f(s, x, m + hm) - 2 * f0 + f(s, x, m - hm)) / hm ** 2,
            "xm": (f(s, x + hx, m + hm) - f(s, x + hx, m - hm)
                   - f(s, x - hx, m + hm) + f(s, x - hx, m - hm)) / (4 * hx * hm),
        }


def generator_apply(spec: GameSpec, phi: CandidateValue, point, controls):
    """Generator of (s, X, M) under controls (theta0, theta1, w) applied to phi.

    A phi = phi_s + w mu phi_x + 0.5 w^2 sigma^2 phi_xx + 0.5 theta0^2 m^2 phi_mm
            + w theta0 sigma m phi_xm
            + sum_j nu_j [phi(s, x + w gamma_j, m(1 + theta1_j)) - phi
                          - w gamma_j phi_x - m theta1_j phi_m]

    Arguments broadcast; ``theta1`` has a trailing axis of length n_atoms.
    """
    s, x, m = point
    th0, th1, w = controls
    mu, sg, gam, nu = spec.coefficients(s if np.ndim(s) == 0 else float(np.asarray(s).flat[0]))
    if np.ndim(s) and np.ptp(np.asarray(s)) > 0:
        raise ValueError("evaluate one time slice per call")
    th1 = np.asarray(th1, dtype=float)
    J = spec.n_atoms
    if J and np.any(th1 <= -1):
        raise ValueError("theta1 must exceed -1")
    d = phi.derivatives(s, x, m)
    out = (d["s"] + w * mu * d["x"] + 0.5 * w * w * sg * sg * d["xx"]
           + 0.5 * th0 * th0 * m * m * d["mm"] + w * th0 * sg * m * d["xm"])
    if J:
        p0 = phi.phi(s, x, m)
        for j in range(J):
            if nu[j] == 0:
                continue
            t1 = th1[..., j]
            jump = phi.phi(s, x + w * gam[j], m * (1.0 + t1)) - p0 - w * gam[j] * d["x"] - m * t1 * d["m"]
            out = out + nu[j] * jump
    out = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite generator value")
    return out


def reduced_generator(spec: GameSpec, s, m, controls, kappa_prime, form="displayed"):
    """m [kappa' - w mu - theta0^2/2 - w theta0 sigma + sum_j nu_j J_j].

    ``form="exact"`` uses the jump term theta1 - w gamma theta1 - (1 + theta1) log(1 + theta1)
    obtained from the generator; ``form="displayed"`` uses
    theta1 (1 - log(1 + theta1) - w gamma).
    """
    if form not in ("exact", "displayed"):
        raise ValueError(f"unknown form {form!r}")
    th0, th1, w = controls
    mu, sg, gam, nu = spec.coefficients(s)
    th1 = np.asarray(th1, dtype=float)
    out = kappa_prime - w * mu - 0.5 * th0 * th0 - w * th0 * sg
    for j in range(spec.n_atoms):
        t = th1[..., j]
        if form == "exact":
            jt = t - w * gam[j] * t - (1.0 + t) * np.log1p(t)
        else:
            jt = t * (1.0 - np.log1p(t) - w * gam[j])
        out = out + nu[j] * jt
    return m * out


def first_order_residual(spec: GameSpec, s, v, form="displayed"):
    """Residuals of the stationarity conditions at v = (theta0, theta1..., w)."""
    mu, sg, gam, nu = spec.coefficients(s)
    J = spec.n_atoms
    th0, th1, w = v[0], np.asarray(v[1:1 + J]), v[-1]
    res = [-th0 - w * sg]
    for j in range(J):
        if form == "displayed":
            res.append(1.0 - np.log1p(th1[j]) - w * gam[j] - th1[j] / (1.0 + th1[j]))
        else:
            res.append(-w * gam[j] - np.log1p(th1[j]))
    res.append(mu + th0 * sg + float(np.sum(nu * gam * th1)))
    return np.array(res, dtype=float)


class NewtonError(RuntimeError):
    pass


@dataclass(frozen=True)
class GameControls:
    theta0: float
    theta1: tuple
    w: float
    residual: float = 0.0
    iterations: int = 0
    form: str = "displayed"

    def as_tuple(self):
        return self.theta0, np.array(self.theta1, dtype=float), self.w

    def as_dict(self):
        return {"theta0": self.theta0, "theta1": list(self.theta1), "w": self.w,
                "residual": self.residual, "iterations": self.iterations, "form": self.form}


def _jacobian(F, v, h=1e-7):
    f0 = F(v)
    Jm = np.empty((f0.size, v.size))
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h * max(1.0, abs(v[i]))
        Jm[:, i] = (F(v + e) - F(v - e)) / (2 * e[i])
    return Jm


def solve_first_order(spec: GameSpec, s=0.0, form="displayed", max_iter=100,
                      tol_res=1e-12, tol_step=1e-14) -> GameControls:
    """Damped Newton for the stationarity system, started at zero.

    Steps are halved while they leave theta1 > -1 or fail to reduce the
    residual norm.  Without jumps the closed form
    theta0 = -mu/sigma, w = mu/sigma^2 is returned directly.
    """
    mu, sg, gam, nu = spec.coefficients(s)
    J = spec.n_atoms
    if sg <= 0:
        raise ValueError("sigma must be positive")
    if J == 0:
        v = np.array([-mu / sg, mu / sg ** 2])
        r = float(np.max(np.abs(first_order_residual(spec, s, v, form))))
        return GameControls(float(v[0]), (), float(v[1]), r, 0, form)
    F = lambda v: first_order_residual(spec, s, v, form)
    v = np.zeros(J + 2)
    r = F(v)
    nr = float(np.max(np.abs(r)))
    for it in range(1, max_iter + 1):
        if nr <= tol_res:
            return GameControls(float(v[0]), tuple(float(a) for a in v[1:1 + J]), float(v[-1]), nr, it - 1, form)
        try:
            step = np.linalg.solve(_jacobian(F, v), -r)
        except np.linalg.LinAlgError as exc:
            raise NewtonError(f"singular Jacobian at iteration {it}: {exc}") from exc
        a = 1.0
        while True:
            cand = v + a * step
            if np.all(cand[1:1 + J] > -1):
                rc = F(cand)
                if np.all(np.isfinite(rc)) and np.max(np.abs(rc)) < nr:
                    break
            a *= 0.5
            if a < 1e-12:
                raise NewtonError(f"line search failed at iteration {it}, residual {nr:.3e}")
        v, r = cand, rc
        nr = float(np.max(np.abs(r)))
        if np.max(np.abs(a * step)) <= tol_step:
            if nr <= 1e3 * tol_res:
                return GameControls(float(v[0]), tuple(float(a) for a in v[1:1 + J]), float(v[-1]), nr, it, form)
            raise NewtonError(f"stalled at residual {nr:.3e}")
    raise NewtonError(f"no convergence after {max_iter} iterations, residual {nr:.3e}")


def value_closed(spec: GameSpec, point) -> float:
    """-x m - m log m - m int_s^T 0.5 (mu/sigma)^2 dt (continuous market only)."""
    if spec.market.has_jumps:
        raise ValueError("closed form holds without jumps")
    s, x, m = point
    GameSpec.check_point(x, m)
    return float(terminal_value(x, m) - m * half_sharpe_integral(spec.market, float(s)))


def closed_form_controls(spec: GameSpec, s=0.0, dw=0.0) -> GameControls:
    """Saddle controls, optionally with the investor shifted by dw and the
    market player's best response theta0 = -w sigma to it."""
    mu, sg, _, _ = spec.coefficients(s)
    w = mu / sg ** 2 + dw
    return GameControls(float(-w * sg), tuple(0.0 for _ in range(spec.n_atoms)), float(w))


# --------------------------------------------------------------------------- verification

@dataclass
class ConditionResult:
    passed: bool
    worst: float
    location: tuple
    probe: object
    n_points: int

    def as_dict(self):
        return {"passed": self.passed, "worst_violation": self.worst,
                "location": list(self.location), "probe_control": self.probe, "n_points": self.n_points}


@dataclass
class HjbiReport:
    conditions: dict = field(default_factory=dict)
    tolerance: float = 1e-8
    lattice_shape: tuple = ()
    n_probes: int = 0
    note: str = "controls are probed on finite grids; the quantifiers over all controls are approximated"

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions.values())

    def as_dict(self):
        return {"passed": self.passed, "tolerance": self.tolerance,
                "lattice_shape": list(self.lattice_shape), "n_probes": self.n_probes, "note": self.note,
                "conditions": {k: v.as_dict() for k, v in self.conditions.items()}}

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2)


def default_lattice(spec: GameSpec, n=20):
    T = spec.market.T
    return (np.linspace(0.0, T, n, endpoint=False), np.linspace(0.1, 5.0, n), np.linspace(0.1, 3.0, n))


def verify_hjbi(spec: GameSpec, phi: CandidateValue, controls, lattice=None, n_probes=41,
                theta0_range=(-2.0, 2.0), w_range=(-2.0, 2.0), theta1_range=(-0.9, 3.0),
                tolerance=1e-8) -> HjbiReport:
    """Check the HJBI conditions at every lattice point.

    (i)   A^{theta_hat, w} phi >= 0 for all probed w,
    (ii)  A^{theta, w_hat} phi <= 0 for all probed theta,
    (iii) |A^{theta_hat, w_hat} phi| <= tolerance,
    plus the terminal identity phi(T, x, m) = -x m - m log m.

    ``controls`` is a :class:`GameControls` or a callable s -> GameControls.
    """
    S, X, M = default_lattice(spec) if lattice is None else lattice
    J = spec.n_atoms
    ctl = controls if callable(controls) else (lambda s: controls)
    wp = np.linspace(*w_range, n_probes)
    t0p = np.linspace(*theta0_range, n_probes)
    if J:
        t1p = np.linspace(*theta1_range, n_probes)
        grids = np.meshgrid(t0p, *([t1p] * J), indexing="ij")
        th0_probe = grids[0].ravel()
        th1_probe = np.stack([g.ravel() for g in grids[1:]], axis=-1)
    else:
        th0_probe = t0p
        th1_probe = np.zeros((t0p.size, 0))
    xx, mm = np.meshgrid(X, M, indexing="ij")
    xx, mm = xx.ravel(), mm.ravel()
    GameSpec.check_point(xx, mm)
    worst = {k: (-np.inf, (), None) for k in ("i", "ii", "iii")}
    for s in S:
        c = ctl(float(s))
        th0h, th1h, wh = c.as_tuple()
        th1h = np.asarray(th1h, dtype=float).reshape(J)
        # (iii)
        A = generator_apply(spec, phi, (s, xx, mm), (th0h, th1h, wh))
        k = int(np.argmax(np.abs(A)))
        if abs(A[k]) > worst["iii"][0]:
            worst["iii"] = (float(abs(A[k])), (float(s), float(xx[k]), float(mm[k])), None)
        # (i): investor deviations, violation = max(0, -A)
        A = generator_apply(spec, phi, (s, xx[:, None], mm[:, None]),
                            (th0h, th1h[None, None, :], wp[None, :]))
        v = -A
        k = np.unravel_index(int(np.argmax(v)), v.shape)
        if v[k] > worst["i"][0]:
            worst["i"] = (float(v[k]), (float(s), float(xx[k[0]]), float(mm[k[0]])), {"w": float(wp[k[1]])})
        # (ii): market deviations, violation = max(0, A)
        A = generator_apply(spec, phi, (s, xx[:, None], mm[:, None]),
                            (th0_probe[None, :], th1_probe[None, :, :], wh))
        k = np.unravel_index(int(np.argmax(A)), A.shape)
        if A[k] > worst["ii"][0]:
            pr = {"theta0": float(th0_probe[k[1]]), "theta1": th1_probe[k[1]].tolist()}
            worst["ii"] = (float(A[k]), (float(s), float(xx[k[0]]), float(mm[k[0]])), pr)
    rep = HjbiReport(tolerance=tolerance, lattice_shape=(len(S), len(X), len(M)), n_probes=n_probes)
    npts = len(S) * len(X) * len(M)
    for key, name in (("i", "investor_deviation"), ("ii", "market_deviation"), ("iii", "saddle_equality")):
        v, loc, pr = worst[key]
        v = max(v, 0.0)
        rep.conditions[name] = ConditionResult(v <= tolerance, v, loc, pr, npts)
    T = spec.market.T
    b = np.abs(phi.phi(T, xx, mm) - terminal_value(xx, mm))
    k = int(np.argmax(b))
    rep.conditions["terminal"] = ConditionResult(bool(b[k] <= tolerance), float(b[k]),
                                                 (T, float(xx[k]), float(mm[k])), None, xx.size)
    return rep


def saddle_violations(spec: GameSpec, phi: CandidateValue, controls, lattice=None, tolerance=1e-8):
    """Per-point residual of condition (iii); fraction of points above tolerance."""
    S, X, M = default_lattice(spec) if lattice is None else lattice
    ctl = controls if callable(controls) else (lambda s: controls)
    xx, mm = np.meshgrid(X, M, indexing="ij")
    res = np.stack([np.abs(generator_apply(spec, phi, (s, xx, mm), ctl(float(s)).as_tuple()))
                    for s in S])
    return res, float(np.mean(res > tolerance))

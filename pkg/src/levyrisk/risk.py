"""Convex risk measures induced by BSDE drivers, and their dual form.

rho(F) = -Y^F(0) for a driver that does not depend on y; the dynamic
version is rho_t(xi, tau) = -Y^xi(t) with the terminal condition at tau.
"""
from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from ._util import Estimate, mc_mean
from .bsde import Claim, Driver, solve_regression
from .market import PathEnsemble, Scenario, girsanov_density
from .tree import Tree, TreeSolution, conditional_expectation, solve_tree


@dataclass(frozen=True)
class RiskMeasureSpec:
    driver: Driver
    label: str = ""

    def __post_init__(self):
        if self.driver.depends_on_y:
            raise ValueError("risk-measure drivers must not depend on y")


def _grid_index(grid, tau):
    grid = np.asarray([float(g) for g in grid])
    i = int(np.argmin(np.abs(grid - float(tau))))
    if abs(grid[i] - float(tau)) > 1e-9 * max(1.0, abs(float(tau))):
        raise ValueError(f"tau={tau} is not a grid point")
    return i


def rho_static(spec: RiskMeasureSpec, claim, paths: PathEnsemble | None = None,
               tree: Tree | None = None, basis_degree: int = 3):
    """-Y(0) of the BSDE with the spec's driver and terminal claim.

    ``claim`` is a :class:`Claim` for Monte Carlo, or leaf values /
    ``callable(dB, dN)`` when a tree is supplied.
    """
    if tree is not None:
        return -solve_tree(spec.driver, claim, tree).Y0
    if paths is None:
        raise ValueError("need paths or a tree")
    return -solve_regression(spec.driver, claim, paths, basis_degree).Y0


def rho_dynamic(spec: RiskMeasureSpec, claim, tau, paths: PathEnsemble | None = None,
                tree: Tree | None = None, basis_degree: int = 3):
    """Dynamic risk process -Y(t) with terminal condition xi at the grid time tau.

    Returns an array (n_paths, n_steps + 1) for Monte Carlo, or a list of
    per-level node arrays for a tree.  After tau the process equals -xi.
    """
    if tree is not None:
        L = _grid_index(tree.grid, tau)
        sol = solve_tree(spec.driver, claim, tree, level=L)
        out = [-y for y in sol.Y]
        b = tree.n_branches
        for n in range(L + 1, tree.n_steps + 1):
            out.append(np.repeat(out[L], b ** (n - L)))
        return out
    if paths is None:
        raise ValueError("need paths or a tree")
    L = _grid_index(paths.grid, tau)
    stopped = Claim(lambda p: claim.payoff(p.truncated(L)) if L < p.n_steps else claim.payoff(p),
                    claim.state, claim.label)
    if L == 0:
        # xi is known at time 0: evaluate it on a zero-width view of the paths
        p0 = PathEnsemble(paths.model, paths.seed, paths.dB[:, :0], paths.jumps[:, :0, :], paths.notes)
        xi = Claim(claim.payoff).values(p0)
        return -np.repeat(xi[:, None], paths.n_steps + 1, axis=1)
    sol = solve_regression(spec.driver, stopped, paths, basis_degree, stop_step=L)
    return -sol.Y


# --------------------------------------------------------------------------- axioms

@dataclass
class AxiomResult:
    passed: bool = True
    worst: float = 0.0
    location: tuple = ()
    n_checks: int = 0
    note: str = ""

    def update(self, violation, location, tol):
        self.n_checks += 1
        v = float(violation)
        if not self.location or v > self.worst:
            self.worst, self.location = v, location
        if violation > tol:
            self.passed = False


@dataclass
class AxiomReport:
    results: dict = field(default_factory=dict)
    mode: str = "tree"

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def as_dict(self):
        return {"mode": self.mode, "passed": self.passed,
                "axioms": {k: {"passed": r.passed, "worst_violation": r.worst,
                               "location": list(r.location), "n_checks": r.n_checks,
                               "note": r.note}
                           for k, r in self.results.items()}}

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2)


def _leaves(claim, tree, level=None):
    L = tree.n_steps if level is None else level
    if callable(claim):
        dB, dN = tree.increments(L)
        v = claim(dB, dN)
    else:
        v = claim
    return np.broadcast_to(np.asarray(v, dtype=object if tree.exact else float),
                           (tree.n_branches ** L,)).copy()


def _max_level_violation(A, B):
    """max over levels/nodes of A - B with its location."""
    worst, loc = None, ()
    for n, (a, b) in enumerate(zip(A, B)):
        d = a - b
        j = int(np.argmax(np.asarray(d, dtype=float)))
        if worst is None or d[j] > worst:
            worst, loc = d[j], (n, j)
    return worst, loc


def _zero_at_origin(driver, tree):
    J = tree.n_atoms
    for t in tree.grid[:-1]:
        z = np.zeros(1, dtype=object if tree.exact else float)
        v = np.asarray(driver(t, z, z, np.zeros((1, J), dtype=z.dtype)))[0]
        if v != 0:
            return False
    return True


def check_axioms(spec: RiskMeasureSpec, claims: Sequence, lambdas=(0, 0.25, 0.5, 0.75, 1),
                 oracle: Tree | None = None, shifts=(-1, 0.5, 2), tolerance=None,
                 paths: PathEnsemble | None = None, consistency=True) -> AxiomReport:
    """Check convexity, monotonicity, translation invariance, consistency, zero-one law.

    On a tree oracle the checks are node-wise; with rational arithmetic the
    default tolerance is 0.  Without an oracle, ``paths`` must be given and
    the static inequalities are checked at t = 0 within 3 standard errors.
    """
    if oracle is None:
        return _check_axioms_mc(spec, claims, lambdas, shifts, paths)
    tree = oracle
    g = spec.driver
    tol = (0 if tree.exact else 1e-12) if tolerance is None else tolerance
    if tree.exact:
        # float shifts/weights would silently leave rational arithmetic
        shifts = [Fraction(a) for a in shifts]
        lambdas = [Fraction(lam) for lam in lambdas]
    rep = AxiomReport(mode="tree")
    leaves = [_leaves(c, tree) for c in claims]
    sols = [solve_tree(g, F, tree) for F in leaves]
    rho = [[-y for y in s.Y] for s in sols]

    conv = rep.results.setdefault("convexity", AxiomResult())
    for i, j in combinations(range(len(leaves)), 2):
        for lam in lambdas:
            mix = lam * leaves[i] + (1 - lam) * leaves[j]
            rm = [-y for y in solve_tree(g, mix, tree).Y]
            rhs = [lam * a + (1 - lam) * b for a, b in zip(rho[i], rho[j])]
            w, loc = _max_level_violation(rm, rhs)
            conv.update(w, (i, j, str(lam)) + loc, tol)

    mono = rep.results.setdefault("monotonicity", AxiomResult())
    for i, j in combinations(range(len(leaves)), 2):
        low = np.minimum(leaves[i], leaves[j])
        rl = [-y for y in solve_tree(g, low, tree).Y]
        for k in (i, j):
            # low <= F_k  =>  rho(low) >= rho(F_k)
            w, loc = _max_level_violation(rho[k], rl)
            mono.update(w, (k,) + loc, tol)
    if len(leaves) == 1:
        low = leaves[0] - 1
        rl = [-y for y in solve_tree(g, low, tree).Y]
        w, loc = _max_level_violation(rho[0], rl)
        mono.update(w, (0,) + loc, tol)

    trans = rep.results.setdefault("translation", AxiomResult())
    for i, F in enumerate(leaves):
        for a in shifts:
            rs = [-y for y in solve_tree(g, F + a, tree).Y]
            for n, (x, y) in enumerate(zip(rs, rho[i])):
                d = np.abs(np.asarray(x - y + a))
                k = int(np.argmax(d.astype(float)))
                trans.update(d[k], (i, str(a), n, k), tol)

    if consistency:
        cons = rep.results.setdefault("consistency", AxiomResult())
        for i, c in enumerate(claims):
            for tau in range(1, tree.n_steps + 1):
                if callable(c):
                    xi = _leaves(c, tree, tau)
                else:
                    xi = conditional_expectation(leaves[i], tree, tree.n_steps, tau)
                Yt = solve_tree(g, xi, tree, level=tau).Y
                for S in range(0, tau + 1):
                    Ys = solve_tree(g, Yt[S], tree, level=S).Y
                    for n in range(S + 1):
                        d = np.abs(np.asarray(Yt[n] - Ys[n]))
                        k = int(np.argmax(d.astype(float)))
                        cons.update(d[k], (i, tau, S, n, k), tol)

    zo = rep.results.setdefault("zero_one", AxiomResult())
    if not _zero_at_origin(g, tree):
        zo.note = "skipped: g(t,0,0) != 0"
    else:
        b = tree.n_branches
        N = tree.n_steps
        first = tree.first_branch(N)
        for i, F in enumerate(leaves):
            for a in range(b):
                ind = (first == a)
                FA = np.where(ind, F, 0 * F)
                YA = solve_tree(g, FA, tree).Y
                for n in range(1, N + 1):
                    indn = tree.first_branch(n) == a
                    target = np.where(indn, sols[i].Y[n], 0 * sols[i].Y[n])
                    d = np.abs(np.asarray(YA[n] - target))
                    k = int(np.argmax(d.astype(float)))
                    zo.update(d[k], (i, a, n, k), tol)
    return rep


def _check_axioms_mc(spec, claims, lambdas, shifts, paths, n_se=3.0):
    if paths is None:
        raise ValueError("need a tree oracle or paths")
    rep = AxiomReport(mode="monte_carlo")
    g = spec.driver

    def solve(c):
        s = solve_regression(g, c, paths)
        return -s.Y0, s.Y0_stderr

    base = [solve(c) for c in claims]
    conv = rep.results.setdefault("convexity", AxiomResult())
    for i, j in combinations(range(len(claims)), 2):
        for lam in lambdas:
            r, se = solve(claims[i].mix(lam, claims[j]))
            rhs = lam * base[i][0] + (1 - lam) * base[j][0]
            tol = n_se * (se + base[i][1] + base[j][1])
            conv.update(r - rhs, (i, j, lam), tol)
    mono = rep.results.setdefault("monotonicity", AxiomResult())
    for i, c in enumerate(claims):
        low = Claim(lambda p, c=c: np.asarray(c.payoff(p)) - np.abs(paths_noise(p)), c.state)
        r, se = solve(low)
        mono.update(base[i][0] - r, (i,), n_se * (se + base[i][1]))
    trans = rep.results.setdefault("translation", AxiomResult())
    for i, c in enumerate(claims):
        for a in shifts:
            r, se = solve(c.shifted(a))
            trans.update(abs(r - base[i][0] + a), (i, a), n_se * (se + base[i][1]))
    return rep


def paths_noise(p: PathEnsemble):
    """A nonnegative-after-abs perturbation used to build dominated claims."""
    return 0.1 * p.W[:, -1]


# --------------------------------------------------------------------------- dual

@dataclass(frozen=True)
class ScenarioFamily:
    """Finite family of Girsanov scenarios with a penalty (entropic by default)."""

    scenarios: tuple
    penalty: Callable | None = None

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        if not self.scenarios:
            raise ValueError("scenario family is empty")

    @classmethod
    def constant_theta0(cls, values, penalty=None):
        return cls(tuple(Scenario(float(v)) for v in values), penalty)


@dataclass(frozen=True, eq=False)
class DualResult:
    value: float
    stderr: float
    index: int
    scenario: Scenario
    values: np.ndarray
    stderrs: np.ndarray

    def as_dict(self):
        sc = self.scenario
        return {"value": self.value, "stderr": self.stderr, "argmax_index": self.index,
                "argmax_theta0": sc.theta0 if not callable(sc.theta0) else None,
                "values": self.values.tolist(), "stderrs": self.stderrs.tolist()}


def rho_dual(claim, family: ScenarioFamily, paths: PathEnsemble) -> DualResult:
    """max over scenarios of E[M_theta(T) (-X)] - penalty(theta).

    The entropic penalty is E[M log M] on the same ensemble (common random
    numbers across scenarios).  Ties go to the first scenario.
    """
    X = claim.values(paths) if isinstance(claim, Claim) else np.asarray(claim, dtype=float)
    vals, ses = [], []
    for sc in family.scenarios:
        M = girsanov_density(paths, sc)[:, -1]
        if family.penalty is None:
            est = mc_mean(M * (-X) - M * np.log(M))
            vals.append(est.value)
            ses.append(est.stderr)
        else:
            est = mc_mean(M * (-X))
            vals.append(est.value - float(family.penalty(sc, paths)))
            ses.append(est.stderr)
    vals = np.array(vals)
    ses = np.array(ses)
    k = int(np.argmax(vals))
    return DualResult(float(vals[k]), float(ses[k]), k, family.scenarios[k], vals, ses)

"""Exact backward induction on a finite non-recombining probability tree.

Each step draws one of a few branches, each carrying a Brownian increment
and per-atom jump counts.  All nodes are enumerated, so conditional
expectations are exact sums.  With ``Fraction`` inputs (and a rational
sqrt(dt)) the whole recursion runs in exact rational arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import isqrt
from typing import Callable, Sequence

import numpy as np

MAX_STEPS = 12
MAX_LEAVES = 2_000_000


@dataclass(frozen=True)
class Branch:
    prob: object
    dB: object
    dN: tuple = ()


def _exact_sqrt(q):
    q = Fraction(q)
    a, b = isqrt(q.numerator), isqrt(q.denominator)
    if a * a != q.numerator or b * b != q.denominator:
        raise ValueError(f"dt={q} has no rational square root; pick a square such as 1/16")
    return Fraction(a, b)


@dataclass(frozen=True)
class Tree:
    """i.i.d. branching structure repeated for ``n_steps`` steps."""

    n_steps: int
    dt: object
    branches: tuple

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if not 1 <= self.n_steps <= MAX_STEPS:
            raise ValueError(f"tree depth must be in [1, {MAX_STEPS}]")
        if len(self.branches) < 2:
            raise ValueError("need at least two branches")
        if len(self.branches) ** self.n_steps > MAX_LEAVES:
            raise ValueError("tree too large to enumerate")
        total = sum(b.prob for b in self.branches)
        if abs(float(total) - 1.0) > 1e-12 or (self.exact and total != 1):
            raise ValueError(f"branch probabilities sum to {float(total)!r}, not 1")
        if any(b.prob < 0 for b in self.branches):
            raise ValueError("negative branch probability")
        J = {len(b.dN) for b in self.branches}
        if len(J) != 1:
            raise ValueError("branches disagree on the number of atoms")

    @classmethod
    def binomial(cls, n_steps, dt, p=None, exact=False):
        """Brownian-only tree with increments +-sqrt(dt) and probabilities 1/2."""
        if exact:
            dt = Fraction(dt)
            s = _exact_sqrt(dt)
            half = Fraction(1, 2)
        else:
            dt = float(dt)
            s = np.sqrt(dt)
            half = 0.5
        return cls(n_steps, dt, (Branch(half, s), Branch(half, -s)))

    @classmethod
    def trinomial(cls, n_steps, dt, jump_probs: Sequence, exact=False):
        """Up/down Brownian moves without jumps, or a single jump of one atom.

        With jump probabilities q_j the Brownian moves have probability
        (1 - sum q)/2 each; Brownian and compensated jump increments are
        orthogonal, so the martingale representation on the tree is exact.
        """
        J = len(jump_probs)
        if exact:
            dt = Fraction(dt)
            s = _exact_sqrt(dt)
            qs = [Fraction(q) for q in jump_probs]
            zero = Fraction(0)
        else:
            dt = float(dt)
            s = np.sqrt(dt)
            qs = [float(q) for q in jump_probs]
            zero = 0.0
        rest = (1 - sum(qs)) / 2
        none = tuple(0 for _ in range(J))
        br = [Branch(rest, s, none), Branch(rest, -s, none)]
        for j, q in enumerate(qs):
            dn = tuple(1 if i == j else 0 for i in range(J))
            br.append(Branch(q, zero, dn))
        return cls(n_steps, dt, tuple(br))

    @property
    def exact(self) -> bool:
        return isinstance(self.dt, Fraction)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def n_atoms(self) -> int:
        return len(self.branches[0].dN)

    def time(self, level):
        return self.dt * level

    @property
    def grid(self):
        return [self.time(i) for i in range(self.n_steps + 1)]

    def _arr(self, values):
        return np.array(values, dtype=object if self.exact else float)

    @property
    def probs(self):
        return self._arr([b.prob for b in self.branches])

    @property
    def branch_dB(self):
        return self._arr([b.dB for b in self.branches])

    @property
    def compensators(self):
        """Expected jump count per step for each atom."""
        return [sum(b.prob * b.dN[j] for b in self.branches) for j in range(self.n_atoms)]

    @property
    def intensities(self):
        return [c / self.dt for c in self.compensators]

    def branch_dNc(self):
        """Compensated jump increments, shape (n_branches, n_atoms)."""
        c = self.compensators
        rows = [[b.dN[j] - c[j] for j in range(self.n_atoms)] for b in self.branches]
        return self._arr(rows).reshape(self.n_branches, self.n_atoms)

    def increments(self, level):
        """Path increments of all nodes at ``level``.

        Returns
        -------
        dB : array (b**level, level)
        dN : array (b**level, level, n_atoms)
        """
        b = self.n_branches
        idx = np.indices((b,) * level).reshape(level, -1).T if level else np.zeros((1, 0), int)
        dB = self.branch_dB[idx]
        dNraw = self._arr([list(br.dN) for br in self.branches]).reshape(b, self.n_atoms)
        dN = dNraw[idx] if level else np.zeros((1, 0, self.n_atoms), dtype=dB.dtype)
        return dB, dN

    def first_branch(self, level):
        """Index of the first-step branch for every node at ``level`` >= 1."""
        return np.arange(self.n_branches ** level) // self.n_branches ** (level - 1)


@dataclass(frozen=True, eq=False)
class TreeSolution:
    """Node values per level: Y[n] has b**n entries; Z, K, G (driver values) for n < level."""

    tree: Tree
    Y: list
    Z: list
    K: list
    G: list
    method_tag: str = "tree"
    notes: tuple = field(default=())
    levels: int = 0

    @property
    def Y0(self):
        return self.Y[0][0]


def _terminal_values(terminal, tree, level):
    if callable(terminal):
        dB, dN = tree.increments(level)
        v = terminal(dB, dN)
    else:
        v = terminal
    v = np.asarray(v, dtype=object if tree.exact else float)
    v = np.broadcast_to(v, (tree.n_branches ** level,)).copy()
    if not tree.exact and not np.all(np.isfinite(v)):
        raise ValueError("terminal values must be finite")
    return v


def solve_tree(driver, terminal, tree: Tree, level=None, implicit=False,
               picard_max=50, picard_tol=1e-14) -> TreeSolution:
    """Exact discrete BSDE by backward induction over all nodes.

    Y_n = E_n[Y_{n+1}] + g(t_n, y*, Z_n, K_n) dt, where
    Z_n = E_n[Y_{n+1} dB] / E[dB^2] and K_{n,j} = E_n[Y_{n+1} dÑ_j] / E[dÑ_j^2].
    The y-argument y* is E_n[Y_{n+1}] (explicit, exact in rational
    arithmetic) or Y_n itself when ``implicit`` (fixed-point, floats only).

    Parameters
    ----------
    terminal : array of length b**level, or callable(dB, dN) -> array
    level : int, optional
        Level of the terminal condition (a deterministic stopping time);
        defaults to the tree depth.
    """
    L = tree.n_steps if level is None else int(level)
    if not 0 <= L <= tree.n_steps:
        raise ValueError("level out of range")
    if implicit and tree.exact:
        raise ValueError("implicit steps need floating-point trees")
    b = tree.n_branches
    J = tree.n_atoms
    p = tree.probs
    pdB = p * tree.branch_dB
    vB = (pdB * tree.branch_dB).sum()
    dNc = tree.branch_dNc()
    pdN = p[:, None] * dNc
    vN = [(pdN[:, j] * dNc[:, j]).sum() for j in range(J)]
    dt = tree.dt
    Y = [None] * (L + 1)
    Zs = [None] * L
    Ks = [None] * L
    Gs = [None] * L
    Y[L] = _terminal_values(terminal, tree, L)
    for n in range(L - 1, -1, -1):
        V = Y[n + 1].reshape(b ** n, b)
        C = V @ p if not tree.exact else (V * p).sum(axis=1)
        Z = (V * pdB).sum(axis=1) / vB
        K = np.empty((b ** n, J), dtype=V.dtype)
        for j in range(J):
            K[:, j] = (V * pdN[:, j]).sum(axis=1) / vN[j] if vN[j] != 0 else 0 * C
        t = tree.time(n)
        g = np.asarray(driver(t, C, Z, K))
        if implicit:
            y = C + g * dt
            for _ in range(picard_max):
                g = np.asarray(driver(t, y, Z, K), dtype=float)
                y_new = C + g * dt
                if np.max(np.abs(y_new - y)) <= picard_tol * max(1.0, np.max(np.abs(y))):
                    y = y_new
                    break
                y = y_new
        else:
            y = C + g * dt
        Y[n] = y
        Zs[n] = Z
        Ks[n] = K
        Gs[n] = g
    return TreeSolution(tree, Y, Zs, Ks, Gs, "tree", (), L)


def conditional_expectation(values, tree: Tree, level_from: int, level_to: int):
    """E[values | node at level_to] for values given at level_from >= level_to."""
    v = np.asarray(values)
    p = tree.probs
    b = tree.n_branches
    for n in range(level_from - 1, level_to - 1, -1):
        v = (v.reshape(b ** n, b) * p).sum(axis=1)
    return v


def along_paths(level_values, tree: Tree, level: int, upto: int):
    """Broadcast node values given at levels < upto onto the nodes of ``level``.

    ``level_values[n]`` has b**n entries; returns an array (b**level, upto)
    whose column n holds the value at each node's ancestor at level n.
    """
    b = tree.n_branches
    idx = np.arange(b ** level)
    cols = [np.asarray(level_values[n])[idx // b ** (level - n)] for n in range(upto)]
    return np.column_stack(cols) if cols else np.zeros((b ** level, 0))

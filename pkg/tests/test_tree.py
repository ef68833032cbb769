from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levyrisk.bsde import check_comparison, piecewise_linear_driver, quadratic_driver, zero_driver
from levyrisk.tree import Tree, along_paths, conditional_expectation, solve_tree

F = Fraction


def test_one_step_expectation():
    t = Tree.binomial(1, F(1, 4), exact=True)
    s = solve_tree(zero_driver(), np.array([F(2), F(0)], dtype=object), t)
    assert s.Y0 == 1


def test_one_step_entropic_by_hand():
    """Y0 = E[Y1] - z^2 dt / 2 with z = E[Y1 dB]/dt, dB = +-1/2, dt = 1/4."""
    t = Tree.binomial(1, F(1, 4), exact=True)
    s = solve_tree(quadratic_driver(), np.array([F(1), F(-1)], dtype=object), t)
    z = (F(1, 2) * 1 * F(1, 2) + F(1, 2) * -1 * F(-1, 2)) / F(1, 4)
    assert z == 2
    assert s.Y0 == 0 - F(1, 2) * z * z * F(1, 4) == F(-1, 2)


def test_martingale_representation_exact():
    """Y_{n+1} = C_n + Z_n dB + K_n dÑ on every child for a 3-branch tree."""
    t = Tree.trinomial(3, F(1, 16), [F(1, 8)], exact=True)
    rng = np.random.default_rng(1)
    leaves = np.array([F(int(v), 3) for v in rng.integers(-9, 10, 27)], dtype=object)
    s = solve_tree(zero_driver(), leaves, t)
    dB, dNc = t.branch_dB, t.branch_dNc()
    for n in range(3):
        V = s.Y[n + 1].reshape(-1, 3)
        recon = s.Y[n][:, None] + s.Z[n][:, None] * dB[None, :] + s.K[n][:, :1] * dNc[None, :, 0]
        assert np.all(V == recon)


def test_round_trip_y_driver():
    """Y_n = E_n[sum_{m>=n} g(Y_m) dt + F] on every node (explicit scheme)."""
    t = Tree.binomial(4, F(1, 4), exact=True)
    g = lambda tt, y, z, k: -F(1, 3) * y + 1
    rng = np.random.default_rng(2)
    leaves = np.array([F(int(v)) for v in rng.integers(-5, 6, 16)], dtype=object)
    s = solve_tree(g, leaves, t)
    dt = t.dt
    for n in range(4):
        # drivers are evaluated at y* = E_n[Y_{n+1}] = Y_n - G_n dt
        acc = leaves.copy()
        for m in range(3, n - 1, -1):
            acc = acc + along_paths(s.G, t, 4, m + 1)[:, m] * dt
        assert np.all(conditional_expectation(acc, t, 4, n) == s.Y[n])


def test_implicit_float():
    t = Tree.binomial(3, 0.25)
    g = lambda tt, y, z, k: -0.5 * y
    s = solve_tree(g, np.array([1.0] * 8), t, implicit=True)
    assert s.Y0 == pytest.approx((1 + 0.5 * 0.25) ** -3, rel=1e-12)
    with pytest.raises(ValueError):
        solve_tree(g, np.array([F(1)] * 8, dtype=object), Tree.binomial(3, F(1, 4), exact=True), implicit=True)


def test_tree_validation():
    with pytest.raises(ValueError):
        Tree.binomial(1, F(1, 2), exact=True)      # no rational sqrt
    with pytest.raises(ValueError):
        Tree.binomial(13, 0.1)
    with pytest.raises(ValueError):
        Tree.trinomial(2, 0.25, [0.6, 0.6])


@st.composite
def comparison_instance(draw):
    depth = draw(st.integers(1, 4))
    sq = draw(st.sampled_from([F(1, 3), F(1, 4), F(1, 5)]))
    q = F(draw(st.integers(1, 4)), 16)
    t = Tree.trinomial(depth, sq * sq, [q], exact=True)
    a = sorted(F(draw(st.integers(-8, 8)), 4) for _ in range(2))
    b = sorted(F(draw(st.integers(-2, 2)), 4) for _ in range(2))
    c = F(draw(st.integers(0, 4)), 8)
    n = 3 ** depth
    F1 = np.array([F(draw(st.integers(-20, 20)), 4) for _ in range(n)], dtype=object)
    bump = np.array([F(draw(st.integers(0, 8)), 4) for _ in range(n)], dtype=object)
    return t, a, b, c, F1, F1 + bump


@given(comparison_instance())
@settings(max_examples=30, deadline=None)
def test_comparison_property(inst):
    """g1 <= g2 and F1 <= F2 give Y1 <= Y2 at every node, in exact arithmetic."""
    t, a, b, c, F1, F2 = inst
    g1 = piecewise_linear_driver(tuple(a), [tuple(b)], t.intensities)
    g2 = piecewise_linear_driver(tuple(a), [tuple(b)], t.intensities, const=c)
    rep = check_comparison(solve_tree(g1, F1, t), solve_tree(g2, F2, t), tolerance=0)
    assert not rep.violated


def test_comparison_same_driver_shift():
    t = Tree.binomial(3, F(1, 4), exact=True)
    leaves = np.array([F(i) for i in range(8)], dtype=object)
    s1 = solve_tree(quadratic_driver(), leaves, t)
    s2 = solve_tree(quadratic_driver(), leaves + 1, t)
    assert all(np.all(b - a == 1) for a, b in zip(s1.Y, s2.Y))
    assert check_comparison(s1, s1).max_diff == 0

from fractions import Fraction

import numpy as np
import pytest

from levyrisk.bsde import (Claim, Driver, LinearDriverParams, Projector, check_comparison, piecewise_linear_driver,
                           quadratic_driver, solve_linear, solve_regression, zero_driver)
from levyrisk.market import JumpAtom, MarketModel, simulate
from levyrisk.maxprinciple import induced_claim

JUMPY = MarketModel(n_steps=20, atoms=(JumpAtom(1.0, 1.5, 0.1),))


@pytest.fixture(scope="module")
def jpaths():
    return simulate(JUMPY, 4000, 1)


def test_constant_claim_zero_driver(jpaths):
    s = solve_regression(zero_driver(), Claim.constant(2.5), jpaths)
    assert s.Y0 == pytest.approx(2.5, abs=1e-14)
    assert np.allclose(s.Y, 2.5, atol=1e-13)
    assert np.abs(s.Z).max() < 1e-12 and np.abs(s.K).max() < 1e-12
    lin = solve_linear(LinearDriverParams(), Claim.constant(2.5), jpaths)
    assert lin.Y0 == pytest.approx(2.5, abs=1e-14)


def test_running_cost_integrates(jpaths):
    """phi = 1, F = 0 gives Y(t) = T - t."""
    lin = solve_linear(LinearDriverParams(phi=1.0), Claim.constant(0.0), jpaths)
    assert np.allclose(lin.Y[0], 1.0 - jpaths.grid, atol=1e-12)
    reg = solve_regression(LinearDriverParams(phi=1.0).driver(jpaths.intensities), Claim.constant(0.0), jpaths)
    assert reg.Y0 == pytest.approx(1.0, abs=1e-12)


def test_terminal_consistency(jpaths):
    claim = Claim(lambda p: np.sin(p.W[:, -1]) + p.counts[:, -1, 0])
    F = claim.values(jpaths)
    for sol in (solve_regression(quadratic_driver(), claim, jpaths),
                solve_linear(LinearDriverParams(0.1, -0.05, 0.2, (0.3,)), claim, jpaths)):
        assert np.array_equal(sol.Y[:, -1], F)


def test_replication_matches_ode():
    m = MarketModel(mu=0.07, sigma=0.2, r=0.05, n_steps=50)
    p = simulate(m, 20_000, 2)
    lp = LinearDriverParams(0.0, -0.05, -0.1)
    reg = solve_regression(lp.driver(p.intensities, p.grid), Claim.constant(1.0), p)
    lin = solve_linear(lp, Claim.constant(1.0), p)
    exact_discrete = (1 + 0.05 * m.dt) ** -m.n_steps
    assert reg.Y0 == pytest.approx(exact_discrete, rel=1e-10)
    assert lin.Y0 == pytest.approx(np.exp(-0.05), abs=4 * lin.Y0_stderr + 1e-12)
    assert abs(reg.Y0 - lin.Y0) / lin.Y0 < 0.02


def test_linear_regression_agree_on_jump_claim(jpaths):
    lp = LinearDriverParams(0.2, -0.1, 0.3, (0.25,))
    claim = Claim(lambda p: p.W[:, -1] + 0.5 * p.counts[:, -1, 0])
    reg = solve_regression(lp.driver(jpaths.intensities, jpaths.grid), claim, jpaths, basis_degree=2)
    lin = solve_linear(lp, claim, jpaths, basis_degree=2)
    assert abs(reg.Y0 - lin.Y0) <= 4 * (lin.Y0_stderr + reg.Y0_stderr) + 0.01


def test_entropic_minimal_risk():
    m = MarketModel(mu=0.05, sigma=0.2, n_steps=50)
    p = simulate(m, 20_000, 3)
    s = solve_regression(quadratic_driver(), induced_claim(m, 1.0), p)
    assert abs(-s.Y0 - (-1.03125)) / 1.03125 < 0.02


def test_translation_regression(jpaths):
    claim = Claim(lambda p: p.W[:, -1] ** 2)
    a = solve_regression(quadratic_driver(), claim, jpaths)
    b = solve_regression(quadratic_driver(), claim.shifted(1.5), jpaths)
    assert b.Y0 - a.Y0 == pytest.approx(1.5, abs=1e-10)


def test_comparison_reports():
    m = MarketModel(n_steps=10)
    p = simulate(m, 500, 4)
    claim = Claim(lambda q: q.W[:, -1])
    s1 = solve_regression(zero_driver(), claim, p)
    rep = check_comparison(s1, s1)
    assert rep.max_diff == 0 and not rep.violated
    s2 = solve_regression(zero_driver(), claim.shifted(1.0), p)
    assert np.allclose(s2.Y - s1.Y, 1.0, atol=1e-12)
    assert check_comparison(s1, s2).max_diff == pytest.approx(-1.0, abs=1e-12)
    assert check_comparison(s2, s1).violated
    with pytest.raises(ValueError):
        check_comparison(s1, solve_regression(zero_driver(), claim, simulate(m.with_steps(5), 500, 4)))


def test_driver_check():
    assert quadratic_driver().check(np.linspace(0, 1, 5), [])["ok"]
    bad = Driver(lambda t, y, z, k: 5 * z, 1.0, (), False, True)
    chk = bad.check(np.linspace(0, 1, 5), [])
    assert not chk["ok"] and chk["max_ratio"] > 1
    p = simulate(MarketModel(n_steps=5), 200, 0)
    with pytest.raises(ValueError):
        solve_regression(bad, Claim.constant(1.0), p)
    nan = Driver(lambda t, y, z, k: np.full_like(z, np.nan), 0.0, (), False, True)
    assert not nan.check(np.linspace(0, 1, 3), [])["finite_at_zero"]


def test_piecewise_linear_exact_arithmetic():
    g = piecewise_linear_driver((Fraction(-1), Fraction(1, 2)), [(Fraction(-1, 2), Fraction(1, 4))], [Fraction(2)])
    z = np.array([Fraction(1), Fraction(-2)], dtype=object)
    k = np.array([[Fraction(1)], [Fraction(-1)]], dtype=object)
    out = g(0, z, z, k)
    assert list(out) == [Fraction(-1) + Fraction(-1), Fraction(-1) + Fraction(-1, 2)]
    assert g.concave and not g.depends_on_y


def test_errors():
    p = simulate(MarketModel(n_steps=5), 50, 0)
    with pytest.raises(ValueError, match="paths"):
        solve_regression(zero_driver(), Claim(lambda q: q.W[:, -1]), p, basis_degree=5)
    with pytest.raises(ValueError, match="finite"):
        solve_regression(zero_driver(), Claim(lambda q: np.full(q.n_paths, np.inf)), p)
    with pytest.raises(ValueError):
        solve_linear(LinearDriverParams(gamma_coef=(-1.5,)), Claim.constant(1.0),
                     simulate(JUMPY.with_steps(5), 50, 0))


def test_single_path_is_flagged():
    p = simulate(MarketModel(n_steps=5), 1, 0)
    s = solve_regression(zero_driver(), Claim(lambda q: q.W[:, -1]), p)
    assert any("degenerate" in n for n in s.notes)
    assert s.Y0 == pytest.approx(p.W[0, -1])


def test_projector_reproduces_polynomials():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 2))
    P = Projector(X, 2)
    target = 1 + X[:, 0] - 2 * X[:, 0] * X[:, 1] + 0.5 * X[:, 1] ** 2
    assert np.allclose(P(target), target, atol=1e-10)
    # duplicated column: rank truncated, still exact
    P2 = Projector(np.column_stack([X[:, 0], X[:, 0]]), 1)
    assert P2.rank == 1 and np.allclose(P2(X[:, 0]), X[:, 0])


def test_csv(tmp_path, jpaths):
    s = solve_regression(zero_driver(), Claim.constant(1.0), jpaths.subset(slice(0, 50)), basis_degree=1)
    f = tmp_path / "sol.csv"
    s.to_csv(f)
    head = f.read_text().splitlines()[0]
    assert head.startswith("path,t,Y,Z")

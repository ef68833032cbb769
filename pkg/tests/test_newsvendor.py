import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import norm

from levyrisk.newsvendor import (F, FixedPointError, NewsvendorSpec, F_inverse, expected_sales, follower_response,
                                 h_and_f, leader_price, leader_profit, order_quantity, price_shift_profits,
                                 residual_first_order, residual_integral_form, residual_price_condition,
                                 residual_sales_condition)

SPEC = NewsvendorSpec()


def test_default_demand_law():
    assert float(SPEC.sd(0.5)) == pytest.approx(2.0)
    assert SPEC.grid[0] == SPEC.delta and SPEC.grid[-1] == SPEC.T


def test_h_and_f_quadrature_oracle():
    h, f = h_and_f(SPEC, 0.5, 12.0)
    pdf = norm(10, 2).pdf
    assert h == pytest.approx(quad(pdf, -np.inf, 12.0, epsabs=1e-13)[0], abs=1e-8)
    assert f == pytest.approx(quad(lambda x: x * pdf(x), -np.inf, 12.0, epsabs=1e-13)[0], abs=1e-8)


def test_h_and_f_limits():
    h, f = h_and_f(SPEC, 0.5, 1e6)
    assert h == 1.0 and f == pytest.approx(10.0)
    assert h_and_f(SPEC, 0.5, 10.0)[0] == 0.5


def _margin_oracle(spec, t, w, Y):
    """Expected sales G(Q) = Y solved for Q by brentq, then y = (w - S) h / (1 - h)."""
    Q = brentq(lambda q: float(expected_sales(spec, t, q)) - Y, -50, 50, xtol=1e-14)
    h = float(h_and_f(spec, t, Q)[0])
    return (w - spec.S) * h / (1 - h)


@pytest.mark.parametrize("w, Y", [(8.0, 1.0), (5.0, 0.2), (19.0, 3.0), (2.0, 1e-4)])
def test_F_inverse_oracle(w, Y):
    y = F_inverse(SPEC, 0.5, w, Y)
    assert y == pytest.approx(_margin_oracle(SPEC, 0.5, w, Y), rel=1e-8)
    assert float(F(SPEC, 0.5, w, y)) == pytest.approx(Y, rel=1e-12)
    vec = F_inverse(SPEC, np.array([0.5, 0.5]), np.array([w, w]), np.array([Y, Y]))
    assert np.allclose(vec, y, rtol=1e-12)


def test_F_inverse_rejects_price_below_salvage():
    with pytest.raises(ValueError):
        F_inverse(SPEC, 0.5, 0.5, 1.0)


@pytest.fixture(scope="module")
def response():
    return follower_response(SPEC, 8.0)


def test_follower_response_residuals(response):
    assert response.Y[-1] == 0
    assert np.max(np.abs(residual_first_order(SPEC, response))) <= 1e-8
    assert np.max(np.abs(residual_sales_condition(SPEC, response))) <= 1e-6
    assert np.max(np.abs(residual_integral_form(SPEC, response))) <= 1e-6
    assert np.all(response.R > response.w) and np.all(response.w > SPEC.S)


def test_deterministic_demand_limit():
    """Tiny demand spread at a fixed positive margin orders exactly the mean."""
    tight = NewsvendorSpec(sbar=1e-9)
    Q = order_quantity(tight, tight.grid, 8.0, 3.0)
    assert np.allclose(Q, 10.0, atol=1e-6)


@pytest.fixture(scope="module")
def solution():
    return leader_price(SPEC)


def test_leader_price(solution):
    sol = solution
    assert sol.Y[-1] == 0 and sol.lam[0] == 0
    assert np.all(sol.w > SPEC.S) and np.all(sol.w <= SPEC.K)
    assert np.max(np.abs(residual_first_order(SPEC, sol.response))) <= 1e-8
    # the optimum sits on the upper price bound, where the stationarity condition has no root
    assert not sol.root_found.any() and np.allclose(sol.w, SPEC.K)
    assert any("no root" in n for n in sol.notes)
    assert np.all(np.isfinite(residual_price_condition(SPEC, sol)))


def test_price_shifts(solution):
    out = price_shift_profits(SPEC, solution)
    down, up = out["shifts"]
    assert down["admissible"] and down["dominated"]
    assert not up["admissible"] and up["profit"] is None
    assert out["base"] == pytest.approx(leader_profit(SPEC, solution.w))


def test_fixed_point_failure():
    with pytest.raises(FixedPointError, match="sweeps"):
        leader_price(SPEC, max_sweeps=1)


def test_csv(tmp_path, solution):
    f = tmp_path / "nv.csv"
    solution.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "t,w,Q,R,Y,lambda" and len(lines) == SPEC.n_steps + 2


@pytest.mark.parametrize("kwargs", [dict(S=5.0), dict(delta=1.0), dict(sbar=0.0), dict(n_steps=1)])
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        NewsvendorSpec(**kwargs)


def test_price_out_of_range():
    with pytest.raises(ValueError):
        follower_response(SPEC, 25.0)

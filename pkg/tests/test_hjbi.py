import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import fsolve

from levyrisk.hjbi import (CandidateValue, GameControls, GameSpec, NewtonError, closed_form_controls,
                           first_order_residual, generator_apply, reduced_generator, saddle_violations,
                           solve_first_order, terminal_value, value_closed, verify_hjbi)
from levyrisk.market import JumpAtom, MarketModel
from levyrisk.maxprinciple import risk_minimize_quadratic

SPEC = GameSpec(MarketModel(mu=0.05, sigma=0.2))
JSPEC = GameSpec(MarketModel(mu=0.05, sigma=0.2, atoms=(JumpAtom(1.0, 1.0, 0.1),)))
SMALL = (np.linspace(0, 1, 5, endpoint=False), np.linspace(0.2, 4, 5), np.linspace(0.2, 2.5, 5))


def test_closed_form_values():
    assert value_closed(SPEC, (0.0, 1.0, 1.0)) == pytest.approx(-1.03125, abs=1e-15)
    assert value_closed(SPEC, (1.0, 2.0, 0.5)) == pytest.approx(terminal_value(2.0, 0.5), abs=1e-15)
    assert value_closed(SPEC, (0.0, 1.0, 1.0)) == risk_minimize_quadratic(SPEC.market, 1.0).value_analytic
    with pytest.raises(ValueError):
        value_closed(JSPEC, (0.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        value_closed(SPEC, (0.0, 1.0, 0.0))


def test_closed_form_controls():
    c = solve_first_order(SPEC)
    assert (c.theta0, c.w) == (pytest.approx(-0.25, abs=1e-15), pytest.approx(1.25, abs=1e-15))
    assert c.residual <= 1e-10
    z = solve_first_order(GameSpec(MarketModel(mu=0.0, sigma=0.2)))
    assert z.theta0 == 0 and z.w == 0


def test_generator_trivial_controls():
    phi = CandidateValue.closed_form(SPEC)
    x, m = np.array([1.0, 2.0]), np.array([0.5, 1.5])
    out = generator_apply(SPEC, phi, (0.3, x, m), (0.0, (), 0.0))
    assert np.allclose(out, m * 0.03125, rtol=1e-14)


@given(st.floats(0, 0.99), st.floats(0.1, 5), st.floats(0.1, 3), st.floats(-2, 2), st.floats(-2, 2),
       st.floats(-0.8, 2))
@settings(max_examples=60, deadline=None)
def test_generator_matches_reduced_form_and_is_linear_in_m(s, x, m, th0, w, th1):
    phi = CandidateValue.closed_form(JSPEC)
    ctl = (th0, np.array([th1]), w)
    a = generator_apply(JSPEC, phi, (s, x, m), ctl)
    kp = 0.5 * 0.25 ** 2
    assert a == pytest.approx(reduced_generator(JSPEC, s, m, ctl, kp, "exact"), abs=1e-11)
    assert generator_apply(JSPEC, phi, (s, x, 2 * m), ctl) == pytest.approx(2 * a, abs=1e-11)


def test_generator_finite_difference_oracle():
    analytic = CandidateValue.closed_form(JSPEC)
    numeric = CandidateValue(analytic.phi, fd_step=1e-4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, x, m = rng.uniform(0, 0.9), rng.uniform(0.2, 4), rng.uniform(0.3, 2.5)
        ctl = (rng.uniform(-1, 1), np.array([rng.uniform(-0.5, 1)]), rng.uniform(-1, 2))
        a = generator_apply(JSPEC, analytic, (s, x, m), ctl)
        b = generator_apply(JSPEC, numeric, (s, x, m), ctl)
        assert a == pytest.approx(b, abs=1e-6)


def _stationary(spec, form):
    fn = lambda v: float(reduced_generator(spec, 0.0, 1.0, (v[0], v[1:-1], v[-1]), 0.0, form))

    def grad(v, h=1e-6):
        return np.array([(fn(v + h * e) - fn(v - h * e)) / (2 * h) for e in np.eye(v.size)])
    return grad


@pytest.mark.parametrize("form, frozen", [
    ("displayed", (-0.50413, 0.50826, 2.52064)),
    ("exact", (-0.20197, -0.09605, 1.00986)),
])
def test_newton_with_one_jump_atom(form, frozen):
    c = solve_first_order(JSPEC, 0.0, form)
    v = np.array([c.theta0, *c.theta1, c.w])
    assert c.residual <= 1e-10
    assert np.allclose(v, frozen, atol=1e-5)
    grad = _stationary(JSPEC, form)
    assert np.max(np.abs(grad(v))) <= 1e-6
    # independent root finder on the finite-difference gradient
    oracle = fsolve(grad, np.array([-0.1, 0.0, 0.5]), xtol=1e-10)
    assert np.allclose(oracle, v, atol=1e-6)


def test_first_order_residual_shape():
    r = first_order_residual(JSPEC, 0.0, np.zeros(3))
    assert r.shape == (3,)
    assert r[0] == 0 and r[2] == pytest.approx(0.05)


def test_newton_failure_reported():
    with pytest.raises(NewtonError):
        solve_first_order(JSPEC, 0.0, "exact", max_iter=1)


def test_verify_closed_form_passes():
    phi = CandidateValue.closed_form(SPEC)
    rep = verify_hjbi(SPEC, phi, closed_form_controls(SPEC), lattice=SMALL, n_probes=21)
    assert rep.passed
    d = json.loads(rep.to_json())
    assert set(d["conditions"]) == {"investor_deviation", "market_deviation", "saddle_equality", "terminal"}


def test_perturbed_control_fails_everywhere():
    phi = CandidateValue.closed_form(SPEC)
    ctl = closed_form_controls(SPEC, dw=0.5)
    res, frac = saddle_violations(SPEC, phi, ctl, lattice=SMALL)
    assert frac == 1.0
    m = SMALL[2][None, None, :]
    assert np.allclose(res, m * 0.5 * 0.04 * 0.25, rtol=1e-10)
    rep = verify_hjbi(SPEC, phi, ctl, lattice=SMALL, n_probes=11)
    assert not rep.conditions["saddle_equality"].passed


def test_wrong_kappa_fails():
    phi = CandidateValue.ansatz(lambda s: 0.0 * np.asarray(s), lambda s: 0.0 * np.asarray(s))
    _, frac = saddle_violations(SPEC, phi, closed_form_controls(SPEC), lattice=SMALL)
    assert frac == 1.0


def test_saddle_with_jumps_exact_form():
    ctl = solve_first_order(JSPEC, 0.0, "exact")
    phi = CandidateValue.from_controls(JSPEC, ctl)
    rep = verify_hjbi(JSPEC, phi, ctl, lattice=SMALL, n_probes=15)
    assert rep.passed, rep.as_dict()


def test_displayed_form_controls_are_not_a_saddle_of_the_generator():
    ctl = solve_first_order(JSPEC, 0.0, "displayed")
    phi = CandidateValue.from_controls(JSPEC, ctl)
    rep = verify_hjbi(JSPEC, phi, ctl, lattice=SMALL, n_probes=15)
    assert not rep.passed


def test_generator_input_checks():
    phi = CandidateValue.closed_form(JSPEC)
    with pytest.raises(ValueError):
        generator_apply(JSPEC, phi, (0.0, 1.0, 1.0), (0.0, np.array([-1.0]), 0.0))
    with pytest.raises(ValueError):
        reduced_generator(SPEC, 0.0, 1.0, (0.0, (), 0.0), 0.0, form="other")
    assert isinstance(closed_form_controls(JSPEC), GameControls)

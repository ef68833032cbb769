import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from levyrisk import _backend, market
from levyrisk.market import (JumpAtom, MarketModel, Scenario, girsanov_density, half_sharpe_integral,
                             relative_entropy, simulate, stochastic_exponential)

JUMPY = MarketModel(T=1.0, n_steps=50, atoms=(JumpAtom(1.0, 2.0, 0.1), JumpAtom(-0.5, 0.5, -0.2)))


def test_simulate_is_deterministic():
    a = simulate(JUMPY, 500, 7)
    b = simulate(JUMPY, 500, 7)
    assert np.array_equal(a.dB, b.dB) and np.array_equal(a.jumps, b.jumps)
    c = simulate(JUMPY, 500, 8)
    assert not np.array_equal(a.dB, c.dB)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2 ** 40))
@settings(max_examples=25, deadline=None)
def test_path_streams_do_not_depend_on_ensemble_size(n1, n2, seed):
    a = simulate(JUMPY, n1, seed, chunk=64)
    b = simulate(JUMPY, n2, seed, chunk=97)
    k = min(n1, n2)
    assert np.array_equal(a.dB[:k], b.dB[:k])
    assert np.array_equal(a.jumps[:k], b.jumps[:k])


def test_backends_are_bit_identical():
    if _backend.compiled_kernels is None:
        pytest.skip("compiled extension not built")
    py, cc = _backend.python_kernels, _backend.compiled_kernels
    key = _backend.seed_key(123)
    u1 = py.counter_uniforms(key, 17, 300, 40)
    u2 = cc.counter_uniforms(key, 17, 300, 40)
    assert np.array_equal(u1, u2)
    tab = market._poisson_cdf_table(0.3)
    assert np.array_equal(py.poisson_lookup(u1.ravel(), tab), cc.poisson_lookup(u2.ravel(), tab))


def test_uniforms_in_open_unit_interval():
    u = _backend.kernels.counter_uniforms(_backend.seed_key(0), 0, 2000, 50)
    assert u.min() > 0 and u.max() < 1
    assert stats.kstest(u.ravel(), "uniform").pvalue > 1e-4


def test_increment_moments():
    p = simulate(JUMPY, 40_000, 1)
    dt = JUMPY.dt
    z = p.dB.ravel() / np.sqrt(dt)
    n = z.size
    assert abs(z.mean()) < 4 / np.sqrt(n)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / n)
    for j, atom in enumerate(JUMPY.atoms):
        counts = p.jumps[:, :, j].sum(axis=1)
        lam = atom.intensity * JUMPY.T
        assert abs(counts.mean() - lam) < 4 * np.sqrt(lam / counts.size)
        assert abs(counts.var() - lam) < 0.05 * lam + 4 * np.sqrt(2 * lam ** 2 / counts.size)


def test_poisson_table_matches_scipy():
    tab = market._poisson_cdf_table(0.7)
    k = np.arange(min(len(tab), 15))
    assert np.allclose(tab[:len(k)], stats.poisson.cdf(k, 0.7), atol=1e-15)


def test_stochastic_exponential_closed_form():
    """Constant coefficients: G_T = exp((a - b^2/2) T + b W_T) prod (1 + g)^N exp(-g lam T)."""
    p = simulate(JUMPY, 200, 3)
    a, b, g = 0.03, 0.4, (0.2, -0.3)
    G = stochastic_exponential(p, a, b, g)
    WT = p.W[:, -1]
    NT = p.counts[:, -1, :]
    expected = np.exp((a - 0.5 * b * b) + b * WT)
    for j, atom in enumerate(JUMPY.atoms):
        expected *= (1 + g[j]) ** NT[:, j] * np.exp(-g[j] * atom.intensity)
    assert np.allclose(G[:, -1], expected, rtol=1e-12)
    assert np.all(G[:, 0] == 1)


def test_girsanov_density_is_a_mean_one_martingale():
    p = simulate(JUMPY, 60_000, 4)
    M = girsanov_density(p, Scenario(-0.3, (0.5, -0.2)))[:, -1]
    assert abs(M.mean() - 1) < 4 * M.std() / np.sqrt(M.size)


def test_relative_entropy_brownian_scenario():
    m = MarketModel(n_steps=20)
    p = simulate(m, 80_000, 5)
    th = 0.6
    H = relative_entropy(girsanov_density(p, Scenario(th))[:, -1])
    assert H.within(0.5 * th * th, 4.0)


def test_half_sharpe_integral():
    m = MarketModel(mu=0.05, sigma=0.2)
    assert half_sharpe_integral(m) == pytest.approx(0.03125, abs=1e-16)
    assert half_sharpe_integral(m, 0.5) == pytest.approx(0.015625, abs=1e-16)
    tv = MarketModel(mu=lambda t: 0.05 + 0 * t, sigma=0.2)
    assert half_sharpe_integral(tv) == pytest.approx(0.03125, abs=1e-13)
    with pytest.raises(ValueError):
        half_sharpe_integral(m, 2.0)


@pytest.mark.parametrize("kwargs", [dict(T=0.0), dict(n_steps=0), dict(sigma=0.0), dict(mu=np.inf),
                                    dict(atoms=(JumpAtom(0.0, 1.0),)),
                                    dict(atoms=(JumpAtom(1.0, -1.0),)),
                                    dict(atoms=(JumpAtom(1.0, 1.0), JumpAtom(1.0, 2.0)))])
def test_invalid_models_rejected(kwargs):
    with pytest.raises(ValueError):
        MarketModel(**kwargs)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        simulate(JUMPY, 0, 1)
    p = simulate(JUMPY, 10, 1)
    with pytest.raises(ValueError):
        girsanov_density(p, Scenario(0.0, (-1.0, 0.0)))
    with pytest.raises(ValueError):
        girsanov_density(p, Scenario(0.0, (0.1,)))
    with pytest.raises(ValueError):
        relative_entropy(np.array([1.0, -1.0]))


def test_csv_roundtrip(tmp_path):
    p = simulate(JUMPY, 5, 2)
    f = tmp_path / "paths.csv"
    p.to_csv(f)
    data = np.loadtxt(f, delimiter=",", skiprows=1)
    assert data.shape == (5 * JUMPY.n_steps, 5)
    assert np.array_equal(data[:, 2], p.dB.ravel())


def test_pure_python_fallback_selected_by_environment():
    import os
    import subprocess
    import sys
    code = ("from levyrisk import BACKEND; from levyrisk.market import *; import numpy as np;"
            "p = simulate(MarketModel(n_steps=5, atoms=(JumpAtom(1.0, 3.0),)), 20, 11);"
            "print(BACKEND); print(repr(float(p.dB.sum())), int(p.jumps.sum()))")
    env = dict(os.environ, LEVYRISK_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    backend, sums = out.stdout.splitlines()
    assert backend == "python"
    p = simulate(MarketModel(n_steps=5, atoms=(JumpAtom(1.0, 3.0),)), 20, 11)
    assert sums == f"{float(p.dB.sum())!r} {int(p.jumps.sum())}"

import numpy as np
import pytest

from orbsde import diagnostics as dg
from orbsde.errors import ValidationError
from orbsde.scenarios import (COUNTEREXAMPLE_PSI, FIXTURES, counterexample_solutions,
                              fixture_counterexample, fixture_martingale, fixture_switching,
                              push_ode_value, switching_dp)
from orbsde.solver import make_engine


def test_ode_oracle_matches_closed_form():
    for n in (4.0, 16.0, 64.0):
        assert push_ode_value(n) == pytest.approx(-(1 - np.exp(-n)) / n, rel=1e-7)


def test_dp_with_prohibitive_costs_is_the_plain_expectation():
    costs = np.array([[0.0, 50.0, 50.0], [50.0, 0.0, 50.0], [50.0, 50.0, 0.0]])
    gains = lambda t, x: np.broadcast_to([0.3, -0.1, 0.0], (len(x), 3))  # noqa: E731
    term = lambda x: np.hstack([np.tanh(x), x**2, np.zeros_like(x)])  # noqa: E731
    N = 64
    V0 = switching_dp(costs, gains, term, 1.0, N)
    sq = np.sqrt(1.0 / N)
    w = ((2 * np.arange(N + 1) - N) * sq)[:, None]
    from math import comb
    p = np.array([comb(N, j) for j in range(N + 1)]) / 2.0**N
    expected = p @ term(w) + np.array([0.3, -0.1, 0.0])
    assert np.allclose(V0, expected, atol=1e-12)


def test_dp_basic_switching_example():
    costs = [[0.0, 0.1], [0.1, 0.0]]
    gains = lambda t, x: np.broadcast_to([0.05, -0.05], (len(x), 2))  # noqa: E731
    V0 = switching_dp(costs, gains, lambda x: np.zeros((len(x), 2)), 1.0, 128)
    assert np.allclose(V0, [0.05, -0.05], atol=1e-12)


def test_basic_switching_example_solver_matches_dp():
    fx = fixture_switching(f=[0.05, -0.05], g=[0.0, 0.0], name="switching-basic")
    res = fx.run()
    assert res.checks[0].passed and res.checks[1].passed


def test_zero_costs_rejected():
    with pytest.raises(ValidationError) as exc:
        fixture_switching(costs=np.zeros((2, 2)))
    assert "structure" in exc.value.assumption


def test_counterexample_closed_forms():
    fx = fixture_counterexample(N=16)
    eng = make_engine(fx.scenario)
    s1, s2 = counterexample_solutions(eng, 1.0)
    assert dg.equation_residual(s1, fx.scenario) <= 1e-12
    assert dg.equation_residual(s2, fx.scenario) <= 1e-12
    assert np.linalg.norm(s1.y0 - s2.y0) == pytest.approx(np.sqrt(2.0))
    # the densities are the derivatives of the cumulative processes -t(1,1,0) and -t(2,0,0)
    assert np.allclose(COUNTEREXAMPLE_PSI[0], [-1, -1, 0])
    assert np.allclose(COUNTEREXAMPLE_PSI[1], [-2, 0, 0])


def test_wrong_density_breaks_the_equation():
    fx = fixture_counterexample(N=8)
    eng = make_engine(fx.scenario)
    s1, _ = counterexample_solutions(eng, 1.0)
    s1.Psi = [-p for p in s1.Psi]
    assert dg.equation_residual(s1, fx.scenario) > 1e-3


def test_martingale_fixture_passes():
    res = fixture_martingale().run()
    assert res.passed, res.checks


def test_counterexample_fixture_records_selection(caplog):
    caplog.set_level("INFO", logger="orbsde.scenarios")
    res = fixture_counterexample().run()
    assert res.passed, res.checks
    assert res.info["selected"] in (1, 2)
    assert "selected solution" in caplog.text


def test_fixture_registry():
    assert set(FIXTURES) == {"martingale", "constant-push", "switching", "counterexample"}

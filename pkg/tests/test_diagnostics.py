import numpy as np
import pytest

from orbsde import diagnostics as dg
from orbsde.errors import ValidationError
from orbsde.forward import TimeGrid, brownian_model
from orbsde.geometry import HalfspaceDomain, whole_space
from orbsde.reflection import identity_field
from orbsde.scenarios import (constant_driver, constant_terminal, embed_terminal,
                              fixture_switching, zero_driver)
from orbsde.solver import Scenario, TerminalSpec, solve_penalized, solve_reflected

HALF_LINE = HalfspaceDomain([[1.0]], [0.0], dim=1)


def push_scenario(N=128):
    return Scenario(TimeGrid(1.0, N), brownian_model(), constant_driver([-1.0]),
                    constant_terminal([0.0]), HALF_LINE, identity_field(1), M=10.0)


def brownian_terminal_scenario(N=32):
    return Scenario(TimeGrid(1.0, N), brownian_model(), zero_driver(1), embed_terminal(1, 0),
                    whole_space(1), identity_field(1))


def test_apriori_deterministic_terminal():
    sc = Scenario(TimeGrid(1.0, 8), brownian_model(), zero_driver(1), constant_terminal([3.0]),
                  HALF_LINE, identity_field(1))
    sol = solve_penalized(sc, 8)
    assert dg.apriori_check(sol, sc) == pytest.approx(1.0)


def test_apriori_and_bmo_for_brownian_terminal():
    sc = brownian_terminal_scenario()
    sol = solve_penalized(sc, 8)
    assert dg.apriori_check(sol, sc) == pytest.approx(2.0, rel=1e-12)
    assert dg.bmo_estimate(sol) == pytest.approx(1.0, rel=1e-12)


def test_zero_denominator_is_flagged():
    sc = Scenario(TimeGrid(1.0, 4), brownian_model(), zero_driver(1), constant_terminal([0.0]),
                  HALF_LINE, identity_field(1))
    flags = {}
    assert dg.apriori_check(solve_penalized(sc, 8), sc, flags) == 0.0
    assert "apriori_ratio" in flags


def test_constant_push_values():
    sc = push_scenario()
    n = 64
    sol = solve_penalized(sc, n)
    K = dg.structural_check(sol, sc)
    assert 0.9 <= K <= 1.0 + 1e-9 and K <= dg.THRESHOLDS["structural_K_1d"]
    assert dg.domain_violation_check(sol, HALF_LINE, 10.0) == pytest.approx(0.5 / n**2, rel=1e-6)
    assert dg.minimality_check(sol, HALF_LINE, 2.0 / n) == 0.0
    assert dg.cone_violation_rate(sol, HALF_LINE) == 0.0
    assert dg.equation_residual(sol, sc) <= 1e-10


def test_interior_fixture_is_clean():
    sc = brownian_terminal_scenario()
    sol = solve_penalized(sc, 8)
    assert dg.structural_check(sol, sc) == 0.0
    assert dg.minimality_check(sol, sc.domain, 0.0) == 0.0
    assert dg.domain_violation_check(sol, sc.domain, 10.0) == 0.0
    assert dg.reflection_mass(sol) == 0.0


def test_equation_residual_on_switching_lattice():
    fx = fixture_switching(N=32)
    sol = solve_penalized(fx.scenario, 32)
    assert dg.equation_residual(sol, fx.scenario) <= 1e-10
    refl, _ = solve_reflected(fx.scenario, (8, 16, 32))
    assert dg.equation_residual(refl, fx.scenario) <= 1e-10


def test_equation_residual_regression_is_small():
    sc = Scenario(TimeGrid(1.0, 8), brownian_model(), constant_driver([-1.0]),
                  constant_terminal([0.0]), HALF_LINE, identity_field(1), engine="regression",
                  path_count=500)
    sol = solve_penalized(sc, 16)
    assert dg.equation_residual(sol, sc) <= 1e-10


def test_stability_compare():
    sc = brownian_terminal_scenario(16)
    a = solve_penalized(sc, 8)
    flags = {}
    assert dg.stability_compare(a, a, sc, sc, flags) == 0.0 and "stability_ratio" in flags
    shifted = Scenario(sc.grid, sc.model, sc.driver,
                       TerminalSpec(lambda x: x[:, :1] + 0.3), sc.domain, sc.reflection)
    b = solve_penalized(shifted, 8, a.engine)
    assert dg.stability_compare(a, b, sc, shifted) <= 1.0 + 1e-9
    other = solve_penalized(brownian_terminal_scenario(8), 8)
    with pytest.raises(ValidationError):
        dg.stability_compare(a, other, sc, sc)


def test_report_round_trip():
    sc = push_scenario(64)
    sol = solve_penalized(sc, 16)
    rep = dg.full_report(sol, sc)
    d = rep.as_dict()
    assert set(d) >= {"apriori_ratio", "structural_K_hat", "minimality_residual", "domain_violation",
                      "cone_violation_rate", "bmo_z_estimate", "equation_residual"}
    assert all(np.isfinite(v) and v >= 0 for k, v in d.items() if k != "flags")
    lines = rep.to_csv().split("\r\n")
    assert lines[0].startswith("apriori_ratio,structural_K_hat")

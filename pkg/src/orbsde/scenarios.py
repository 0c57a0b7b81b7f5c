"""Built-in verification fixtures with independent reference values.

Each fixture bundles a scenario, its reference quantities and an oracle
that does not call into the solver (the DP switching recursion, a stiff
ODE integration, closed-form solutions).  ``Fixture.run()`` solves the
scenario and returns a table of checks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import diagnostics as dg
from .forward import TimeGrid, brownian_model
from .geometry import HalfspaceDomain, SwitchingDomain, check_switching_costs
from .reflection import (build_switching_h, counterexample_domain, counterexample_field,
                         identity_field, limiting_cone_membership)
from .solver import (DiscreteSolution, DriverSpec, Scenario, TerminalSpec, make_engine,
                     solve_penalized, solve_reflected, with_schedule)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Component factories shared with the scenario-file loader
# ---------------------------------------------------------------------------


def constant_driver(value, name="constant"):
    v = np.atleast_1d(np.asarray(value, dtype=float))

    def f(t, x, y, z):
        return np.broadcast_to(v, (len(y), v.shape[0])).copy()

    return DriverSpec(f, L=max(float(np.linalg.norm(v)), 1e-300),
                      alpha_hat=lambda t, x: np.full(len(x), np.linalg.norm(v)),
                      lipschitz_y=0.0, name=name)


def zero_driver(d):
    return constant_driver(np.zeros(d), name="zero")


def linear_driver(A, b=None, name="linear"):
    """``f = A y + b``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
    L = float(max(np.linalg.norm(A, 2), np.linalg.norm(b), 1e-300))

    def f(t, x, y, z):
        return y @ A.T + b

    return DriverSpec(f, L=L, alpha_hat=lambda t, x: np.full(len(x), np.linalg.norm(b)),
                      lipschitz_y=float(np.linalg.norm(A, 2)), name=name)


#: Truncation level of ``z`` in the cubic driver; the reference solutions have ``z_3 = 1``.
CUBIC_Z_CAP = 2.0


def cubic_z_driver(cap=CUBIC_Z_CAP):
    """``f = -(z_3^3, z_3^3, 0)`` with ``z_3`` clipped to ``[-cap, cap]``."""
    def f(t, x, y, z):
        c = np.clip(z[:, 2, 0], -cap, cap) ** 3
        out = np.zeros((len(y), 3))
        out[:, 0] = -c
        out[:, 1] = -c
        return out

    bound = np.sqrt(2.0) * cap**3
    return DriverSpec(f, L=1.0, alpha_hat=lambda t, x: np.full(len(x), bound),
                      lipschitz_y=0.0, name="cubic-z")


def constant_terminal(value):
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return TerminalSpec(lambda x: np.broadcast_to(v, (len(x), v.shape[0])).copy(), "constant")


def tanh_terminal(offset, scale, shift=0.0):
    """``g^l(x) = offset^l + scale^l tanh(x_1 + shift^l)``."""
    off = np.atleast_1d(np.asarray(offset, dtype=float))
    sc = np.broadcast_to(np.asarray(scale, dtype=float), off.shape)
    sh = np.broadcast_to(np.asarray(shift, dtype=float), off.shape)
    return TerminalSpec(lambda x: off + sc * np.tanh(x[:, :1] + sh), "tanh")


def embed_terminal(d, component):
    """``g(x) = x_1 e_component``."""
    def g(x):
        out = np.zeros((len(x), d))
        out[:, component] = x[:, 0]
        return out

    return TerminalSpec(g, "embed")


# ---------------------------------------------------------------------------
# Fixture plumbing
# ---------------------------------------------------------------------------


@dataclass
class Check:
    label: str
    value: float
    threshold: float
    passed: bool
    provenance: str = ""


@dataclass
class FixtureResult:
    name: str
    checks: list
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


@dataclass
class Fixture:
    name: str
    scenario: Scenario
    reference: dict
    oracle: Optional[Callable] = None
    runner: Optional[Callable] = None

    def run(self) -> FixtureResult:
        return self.runner(self)


def _le(label, value, threshold, provenance=""):
    value = float(value)
    return Check(label, value, float(threshold), bool(value <= threshold), provenance)


def _brownian_scenario(name, T, N, domain, field_, driver, terminal, schedule=None, M=None,
                       seed=0):
    sc = Scenario(TimeGrid(T, N), brownian_model(), driver, terminal, domain, field_,
                  M=M, seed=seed, name=name)
    return with_schedule(sc, sc.schedule if schedule is None else schedule)


def binomial_expectation(values_at_T, N):
    """``E[v(W_T)]`` on an ``N``-step symmetric walk; ``values_at_T`` indexed by up-moves."""
    p = np.array([comb(N, j) for j in range(N + 1)], dtype=float) / 2.0**N
    return p @ np.asarray(values_at_T)


# ---------------------------------------------------------------------------
# Martingale (reflection inactive)
# ---------------------------------------------------------------------------


def fixture_martingale(N=64, T=1.0, cost=0.1) -> Fixture:
    """Two-mode switching domain, ``f = 0``, terminal map strictly inside."""
    costs = np.array([[0.0, cost], [cost, 0.0]])
    dom = SwitchingDomain(costs)
    sh = build_switching_h(costs)
    # |g1 - g2| <= 0.02 + 0.03 + 0.01 < cost
    term = tanh_terminal([0.02, 0.0], [0.03, 0.01], [0.3, 0.0])
    sc = _brownian_scenario("martingale", T, N, dom, sh.field(), zero_driver(2), term)

    def oracle():
        grid = sc.grid
        wT = (2 * np.arange(grid.N + 1) - grid.N) * np.sqrt(grid.dt)
        return binomial_expectation(term.g(wT[:, None]), grid.N)

    def runner(fx):
        ref = fx.oracle()
        sol, rep = solve_reflected(fx.scenario)
        pen = solve_penalized(fx.scenario, fx.scenario.schedule[-1], sol.engine)
        rows = rep.rows
        checks = [
            _le("Y0 vs binomial expectation", np.abs(pen.y0 - ref).max(), 1e-12, "closed form"),
            _le("max |Phi|", max(np.abs(p).max() for p in pen.Phi), 0.0),
            _le("minimality residual", max(r["minimality_residual"] for r in rows), 0.0),
            _le("domain violation", max(r["domain_violation"] for r in rows), 0.0),
            _le("Cauchy decrement", np.nanmax([r["cauchy"] for r in rows]), 1e-24),
        ]
        return FixtureResult(fx.name, checks, {"Y0": pen.y0.tolist(), "reference": ref.tolist()})

    return Fixture("martingale", sc, {"Phi": 0.0}, oracle, runner)


# ---------------------------------------------------------------------------
# Constant push
# ---------------------------------------------------------------------------


def push_ode_value(n, T=1.0):
    """``y(0)`` for ``y' = 1 + n min(y, 0)``, ``y(T) = 0``, by an implicit stiff integrator."""
    sol = solve_ivp(lambda s, y: -(1.0 + n * np.minimum(y, 0.0)), (0.0, T), [0.0],
                    method="Radau", rtol=1e-10, atol=1e-13)
    # integrated in reversed time s = T - t
    return float(sol.y[0, -1])


def fixture_constant_push(N=256, T=1.0, M=10.0, schedule=None) -> Fixture:
    dom = HalfspaceDomain([[1.0]], [0.0], dim=1)
    sc = _brownian_scenario("constant-push", T, N, dom, identity_field(1),
                            constant_driver([-1.0]), constant_terminal([0.0]), schedule, M)

    def runner(fx):
        sol, rep = solve_reflected(fx.scenario)
        eng = sol.engine
        checks = []
        for n in (16, 64):
            y0 = float(solve_penalized(fx.scenario, n, eng).y0[0])
            ref = push_ode_value(n, T)
            checks.append(_le(f"|Y0^n - ode| / |ode| at n={n}", abs(y0 - ref) / abs(ref), 0.15,
                              "stiff ODE"))
        n_fin = rep.selected_n
        checks.append(_le("|reflected Y0| * n/2", abs(sol.y0[0]) * n_fin / 2.0, 1.0))
        grid = fx.scenario.grid
        idx = [i for i in range(grid.N) if 0.1 <= i * grid.dt <= 0.9]
        psi_err = np.mean([dg._wmean(sol, i, np.abs(sol.Psi[i][:, 0] + 1.0)) for i in idx])
        checks.append(_le("mean |Psi + 1| on [0.1, 0.9]", psi_err, 0.1))
        for key in ("minimality_residual", "domain_violation"):
            col = [r[key] for r in rep.rows]
            ok = all(b <= a for a, b in zip(col, col[1:]))
            checks.append(Check(f"{key} non-increasing", col[-1], col[0], ok))
        dec = [r["cauchy"] for r in rep.rows[1:]]
        checks.append(Check("Cauchy decrement strictly decreasing", dec[-1], dec[0],
                            all(b < a for a, b in zip(dec, dec[1:]))))
        return FixtureResult(fx.name, checks, {"rows": rep.rows})

    return Fixture("constant-push", sc, {"Y": 0.0, "Psi": -1.0}, push_ode_value, runner)


# ---------------------------------------------------------------------------
# Optimal switching
# ---------------------------------------------------------------------------


def switching_dp(costs, gains, terminal, T, N):
    """Switching value on the binomial walk ``X = W``.

    ``gains(t, x) -> (P, d)`` are the running rewards per mode and
    ``terminal(x) -> (P, d)`` the terminal values.  Each slice applies the
    obstacle ``max_j (V^j - c^{lj})`` until no component changes.
    """
    costs = np.asarray(costs, dtype=float)
    d = costs.shape[0]
    dt = T / N
    sq = np.sqrt(dt)
    x = ((2 * np.arange(N + 1) - N) * sq)[:, None]
    V = np.asarray(terminal(x), dtype=float)
    for i in range(N - 1, -1, -1):
        x = ((2 * np.arange(i + 1) - i) * sq)[:, None]
        cont = 0.5 * (V[:-1] + V[1:]) + dt * np.asarray(gains(i * dt, x), dtype=float)
        V = cont.copy()
        for _ in range(10 * d + 10):
            switched = np.max(V[:, None, :] - costs[None, :, :], axis=2)
            new = np.maximum(cont, switched)
            if np.array_equal(new, V):
                break
            V = new
    return V[0]


def fixture_switching(d=2, costs=None, f=None, g=None, T=1.0, N=128, schedule=None,
                      name="switching") -> Fixture:
    """Optimal switching with constant or ``(t, x)``-dependent mode rewards.

    The defaults put the constraint in play on a sizeable part of the
    lattice: rewards ``(0.25, -0.25)`` and terminal ``+-0.05 tanh(x)`` with
    costs ``0.1``.
    """
    costs = np.full((d, d), 0.1) - 0.1 * np.eye(d) if costs is None else np.asarray(costs, float)
    check_switching_costs(costs)
    d = costs.shape[0]
    if f is None:
        f = np.linspace(0.25, -0.25, d)
    if callable(f):
        gains = f
    else:
        fv = np.asarray(f, dtype=float)
        gains = lambda t, x: np.broadcast_to(fv, (len(x), d))  # noqa: E731
    if g is None:
        term = tanh_terminal(np.zeros(d), np.linspace(0.05, -0.05, d))
    elif isinstance(g, TerminalSpec):
        term = g
    else:
        term = constant_terminal(np.broadcast_to(np.asarray(g, float), (d,)))
    amp = float(np.abs(gains(0.0, np.zeros((1, 1)))).max())

    def drv(t, x, y, z):
        return np.asarray(gains(t, x), dtype=float).reshape(len(y), d)

    driver = DriverSpec(drv, L=max(amp, 1e-300), alpha_hat=lambda t, x: np.full(len(x), amp * np.sqrt(d)),
                        lipschitz_y=0.0, name="mode-rewards")
    dom = SwitchingDomain(costs)
    sh = build_switching_h(costs)
    sc = _brownian_scenario(name, T, N, dom, sh.field(), driver, term, schedule)

    def oracle():
        return switching_dp(costs, gains, term.g, sc.grid.T, sc.grid.N)

    def runner(fx):
        V0 = fx.oracle()
        sol, rep = solve_reflected(fx.scenario)
        err = float(np.abs(sol.y0 - V0).max())
        tol = 0.05 * float(np.abs(V0).max()) + 0.01
        slack = min(float(dom.slacks(y).min()) for y in sol.Y)
        dec = [r["cauchy"] for r in rep.rows[1:]]
        checks = [
            _le("|Y0 - V0|_inf", err, tol, "DP oracle"),
            Check("min constraint slack after projection", slack, -1e-12, slack >= -1e-12),
            Check("Cauchy decrement strictly decreasing", dec[-1], dec[0],
                  all(b < a for a, b in zip(dec, dec[1:]))),
        ]
        return FixtureResult(fx.name, checks, {"Y0": sol.y0.tolist(), "V0": V0.tolist(),
                                               "rows": rep.rows})

    return Fixture(name, sc, {"costs": costs}, oracle, runner)


# ---------------------------------------------------------------------------
# Non-uniqueness with a discontinuous reflection field
# ---------------------------------------------------------------------------

#: Constant reflection densities obtained by substituting the closed forms.
COUNTEREXAMPLE_PSI = (np.array([-1.0, -1.0, 0.0]), np.array([-2.0, 0.0, 0.0]))


def counterexample_solutions(engine, T):
    """The two closed-form solutions as :class:`DiscreteSolution` objects on ``engine``."""
    grid = engine.grid
    sols = []
    for which, psi in enumerate(COUNTEREXAMPLE_PSI):
        Y, Z, Phi, Psi = [], [], [], []
        for i in range(grid.N + 1):
            w = engine.state(i)[:, 0]
            y = np.zeros((len(w), 3))
            y[:, 2] = w
            if which == 1:
                y[:, 0] = T - i * grid.dt
                y[:, 1] = -(T - i * grid.dt)
            z = np.zeros((len(w), 3, 1))
            last = i == grid.N
            z[:, 2, 0] = 0.0 if last else 1.0
            Y.append(y)
            Z.append(z)
            Psi.append(np.zeros((len(w), 3)) if last else np.broadcast_to(psi, (len(w), 3)).copy())
            Phi.append(Psi[-1].copy())
        sols.append(DiscreteSolution(Y, Z, Phi, Psi, np.inf, np.inf, "reflected", engine, grid))
    return sols


def fixture_counterexample(N=64, T=1.0, schedule=None) -> Fixture:
    dom = counterexample_domain()
    field_ = counterexample_field(dom)
    sc = _brownian_scenario("counterexample", T, N, dom, field_, cubic_z_driver(),
                            embed_terminal(3, 2), schedule, M=10.0)

    def runner(fx):
        scn = fx.scenario
        engine = make_engine(scn)
        refs = counterexample_solutions(engine, scn.grid.T)
        checks = []
        for k, ref in enumerate(refs, start=1):
            checks.append(_le(f"solution {k} equation residual", dg.equation_residual(ref, scn),
                              1e-12, "closed form"))
            ok = True
            for i in range(scn.grid.N):
                y = ref.Y[i]
                for j in range(len(y)):
                    if not limiting_cone_membership(field_, dom, i * scn.grid.dt, None, y[j],
                                                    ref.Z[i][j], ref.Psi[i][j]):
                        ok = False
                        break
                if not ok:
                    break
            checks.append(Check(f"solution {k} reflection cone membership", float(ok), 1.0, ok))
        sol, rep = solve_reflected(scn, engine=engine)
        dists = [float(np.linalg.norm(sol.y0 - r.y0)) for r in refs]
        pick = int(np.argmin(dists))
        gap = float(np.linalg.norm(refs[0].y0 - refs[1].y0))
        tol = 0.05 * scn.grid.T * np.sqrt(2.0)
        checks.append(_le("distance of solver Y0 to nearest closed form", dists[pick], tol))
        checks.append(Check("gap between the closed forms equals T sqrt(2)", gap,
                            scn.grid.T * np.sqrt(2.0),
                            abs(gap - scn.grid.T * np.sqrt(2.0)) <= 1e-12))
        log.info("counterexample: solver selected solution %d (distances %s)", pick + 1, dists)
        return FixtureResult(fx.name, checks, {"selected": pick + 1, "distances": dists,
                                               "Y0": sol.y0.tolist(), "rows": rep.rows})

    return Fixture("counterexample", sc, {"psi": COUNTEREXAMPLE_PSI}, None, runner)


FIXTURES = {
    "martingale": fixture_martingale,
    "constant-push": fixture_constant_push,
    "switching": fixture_switching,
    "counterexample": fixture_counterexample,
}


def run_fixtures(names=None):
    names = list(FIXTURES) if names is None else list(names)
    return [FIXTURES[n]().run() for n in names]

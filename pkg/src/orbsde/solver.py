"""Backward solver for the penalised BSDE and its reflected limit.

One backward step on the grid reads

    Y_i = E_i[Y_{i+1}] + dt f(t_i, X_i, Y_i, Z_i) - dt H(t_i, X_i, Y_i, Z_i) grad_phi(Y_i)
    Z_i = E_i[Y_{i+1} dW_i^T] / dt

and is solved per node by a damped fixed-point iteration; ``Z_i`` is
explicit.  :func:`solve_reflected` runs an increasing penalisation schedule
on common random numbers and monitors the Cauchy decrement between
consecutive entries.
"""
from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field, replace
from math import ceil
from typing import Callable, Optional

import numpy as np

from . import diagnostics
from .engines import LatticeEngine, RegressionEngine
from .errors import NumericalError, ValidationError
from .forward import ForwardModel, TimeGrid, build_lattice, check_forward_model, simulate
from .geometry import ConvexDomain
from .penalty import PenaltyParams, grad_phi
from .reflection import ReflectionField, validate_bound, validate_obliqueness

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (8, 16, 32, 64, 128)
MAX_N_DT = 4.0


@dataclass
class DriverSpec:
    """Driver ``f(t, x (P,q), y (P,d), z (P,d,k)) -> (P,d)``.

    ``alpha_hat(t, x) -> (P,)`` and ``L`` certify
    ``|f| <= alpha_hat + L (|y| + |z|)``; by default
    ``alpha_hat = L (1 + |x|^p)``.  ``lipschitz_y`` feeds the damping.
    """

    f: Callable
    L: float
    p: float = 0.0
    alpha_hat: Optional[Callable] = None
    lipschitz_y: Optional[float] = None
    name: str = "user"

    def alpha(self, t, x):
        if self.alpha_hat is not None:
            return np.broadcast_to(np.asarray(self.alpha_hat(t, x), dtype=float), (x.shape[0],))
        return self.L * (1.0 + np.linalg.norm(x, axis=1) ** self.p)

    @property
    def lip_y(self):
        return self.L if self.lipschitz_y is None else self.lipschitz_y


@dataclass
class TerminalSpec:
    g: Callable  # (P, q) -> (P, d)
    name: str = "user"


@dataclass
class Scenario:
    grid: TimeGrid
    model: ForwardModel
    driver: DriverSpec
    terminal: TerminalSpec
    domain: ConvexDomain
    reflection: ReflectionField
    schedule: tuple = DEFAULT_SCHEDULE
    M: Optional[float] = None
    engine: str = "lattice"
    degree: int = 2
    path_count: int = 10_000
    picard_tol: float = 1e-11
    picard_cap: int = 200
    seed: int = 0
    name: str = "scenario"
    config: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.domain.dim


@dataclass
class DiscreteSolution:
    """Per-slice arrays ``Y[i] (n_i, d)``, ``Z[i] (n_i, d, k)``, ``Phi``, ``Psi``.

    ``kind`` is ``"penalized"`` (``Phi = grad_phi(Y)``, ``Psi = H Phi``) or
    ``"reflected"`` (projected ``Y`` with ``Psi`` read off the discrete
    equation).  ``Z``, ``Phi`` and ``Psi`` at the terminal slice are zero.
    """

    Y: list
    Z: list
    Phi: list
    Psi: list
    n: float
    M: float
    kind: str
    engine: object
    grid: TimeGrid
    coefficients: Optional[list] = None
    iterations: Optional[list] = None
    flags: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.grid.nodes

    @property
    def y0(self):
        w = self.engine.weights(0)
        return w @ self.Y[0]

    def weights(self, i):
        return self.engine.weights(i)

    def reflection(self, i):
        """Reflection density used by the minimality check."""
        return self.Phi[i] if self.kind == "penalized" else self.Psi[i]


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------


def refined_grid(grid: TimeGrid, schedule, max_n_dt=MAX_N_DT) -> TimeGrid:
    """Smallest refinement of ``grid`` keeping ``n * dt <= max_n_dt`` for the schedule."""
    n_max = max(schedule) if len(schedule) else 0
    N = max(grid.N, int(ceil(n_max * grid.T / max_n_dt)))
    return grid if N == grid.N else TimeGrid(grid.T, N)


def make_engine(scenario: Scenario):
    if scenario.engine == "lattice":
        return LatticeEngine(build_lattice(scenario.grid, scenario.model.k), scenario.model)
    if scenario.engine == "regression":
        bundle = simulate(scenario.model, scenario.grid, scenario.path_count, scenario.seed)
        return RegressionEngine(bundle, scenario.degree)
    raise ValidationError(f"unknown engine '{scenario.engine}'", assumption="engine choice")


def terminal_values(scenario: Scenario, engine):
    X = engine.state(engine.N)
    G = np.atleast_2d(np.asarray(scenario.terminal.g(X), dtype=float))
    if G.shape != (X.shape[0], scenario.d):
        raise ValidationError(f"terminal map returned shape {G.shape}", assumption="terminal map")
    return G


def default_M(scenario: Scenario, engine) -> float:
    y_ref = float(np.linalg.norm(terminal_values(scenario, engine), axis=1).max())
    return 10.0 * (1.0 + y_ref)


def validate_scenario(scenario: Scenario, engine=None, samples=200):
    """Sampled checks of every standing assumption; raises ValidationError."""
    rng = np.random.default_rng(scenario.seed)
    check_forward_model(scenario.model, seed=scenario.seed, T=scenario.grid.T)
    engine = make_engine(scenario) if engine is None else engine
    d, k, q = scenario.d, scenario.model.k, scenario.model.q
    if scenario.reflection.dim != d:
        raise ValidationError("reflection field dimension differs from domain dimension",
                              assumption="reflection dimension")
    # terminal condition valued in the closed domain
    G = terminal_values(scenario, engine)
    dist = scenario.domain.distance(G)
    tol = 1e-8 * (1.0 + np.linalg.norm(G, axis=1))
    if np.any(dist > tol):
        raise ValidationError(f"terminal map leaves the closed domain (distance {dist.max():.3g})",
                              assumption="terminal values in the closed domain")
    # driver growth
    X = engine.state(engine.N)[rng.integers(0, engine.node_count(engine.N), samples)]
    Y = rng.standard_normal((samples, d)) * (1.0 + np.abs(G).max())
    Z = rng.standard_normal((samples, d, k))
    t = float(rng.uniform(0, scenario.grid.T))
    F = np.asarray(scenario.driver.f(t, X, Y, Z), dtype=float)
    bound = scenario.driver.alpha(t, X) + scenario.driver.L * (
        np.linalg.norm(Y, axis=1) + np.linalg.norm(Z.reshape(samples, -1), axis=1))
    if np.any(np.linalg.norm(F, axis=1) > bound * (1 + 1e-9) + 1e-12):
        raise ValidationError("driver exceeds its declared growth bound",
                              assumption="driver growth bound L")
    # reflection bound and obliqueness
    pts = np.vstack([scenario.domain.sample_boundary(samples // 2, rng), Y])
    if validate_bound(scenario.reflection, pts) > scenario.reflection.bound_L * (1 + 1e-9):
        raise ValidationError("reflection field exceeds its declared bound",
                              assumption="reflection bound L")
    _, violations = validate_obliqueness(scenario.reflection, scenario.domain, samples // 2,
                                         seed=scenario.seed)
    if violations:
        v = violations[0]
        raise ValidationError(
            f"obliqueness below eta={scenario.reflection.obliqueness_eta} at {v['point']} "
            f"(H u . u = {v['value']:.4g})", assumption="reflection obliqueness eta")
    return engine


# ---------------------------------------------------------------------------
# Backward recursion
# ---------------------------------------------------------------------------


def damping(dt, n, L_H, L_f=0.0):
    """Relaxation weight for the per-node fixed point.

    For the scalar model ``y = c - a y`` with ``a = dt (n L_H + L_f)`` the
    relaxed map has slope ``1 - lam (1 + a)``, which vanishes at this value.
    """
    return 1.0 / (1.0 + dt * (n * L_H + L_f))


def backward_step(engine, scenario: Scenario, i, n, y_next, M=np.inf):
    """Solve one slice. Returns ``(Y_i, Z_i, Phi_i, Psi_i, iterations)``."""
    dt = scenario.grid.dt
    t = i * dt
    X = engine.state(i)
    E = engine.expect(i, y_next)
    Z = engine.expect_dw(i, y_next) / dt
    params = PenaltyParams(n, M)
    dom, H, f = scenario.domain, scenario.reflection, scenario.driver.f
    lam = damping(dt, n, H.bound_L, scenario.driver.lip_y)

    def G(idx, Yc):
        proj = dom.project_batch(Yc)
        phi_g = grad_phi(params, dom, Yc, proj) if n > 0 else np.zeros_like(Yc)
        push = np.einsum("pij,pj->pi", H(t, X[idx], Yc, Z[idx]), phi_g) if n > 0 else 0.0
        return E[idx] + dt * np.asarray(f(t, X[idx], Yc, Z[idx])) - dt * push

    Y = E.copy()
    active = np.arange(len(Y))
    iterations = 0
    for it in range(scenario.picard_cap):
        iterations = it + 1
        Ya = Y[active]
        R = G(active, Ya) - Ya
        res = np.abs(R).max(axis=1)
        done = res <= scenario.picard_tol * (1.0 + np.abs(Ya).max(axis=1))
        # the relaxed step is applied to converged nodes too; it only sharpens them
        Y[active] = Ya + lam * R
        last_res = res[~done]
        active = active[~done]
        if active.size == 0:
            break
    else:
        worst = int(np.argmax(last_res))
        raise NumericalError(
            f"fixed-point iteration did not converge at t={t:.6g}, node {int(active[worst])}, "
            f"residual {last_res[worst]:.3e} after {iterations} iterations (dt*n*L too large?)",
            time=t, node=int(active[worst]), residual=float(last_res[worst]))
    if n > 0:
        Phi = grad_phi(params, dom, Y)
        Psi = np.einsum("pij,pj->pi", H(t, X, Y, Z), Phi)
    else:
        Phi = np.zeros_like(Y)
        Psi = np.zeros_like(Y)
    return Y, Z, Phi, Psi, iterations


def solve_penalized(scenario: Scenario, n, engine=None, M=None) -> DiscreteSolution:
    engine = make_engine(scenario) if engine is None else engine
    if M is None:
        M = scenario.M if scenario.M is not None else default_M(scenario, engine)
    N, d, k = scenario.grid.N, scenario.d, engine.k
    Y = [None] * (N + 1)
    Z = [None] * (N + 1)
    Phi = [None] * (N + 1)
    Psi = [None] * (N + 1)
    iters = [0] * (N + 1)
    coefs = [None] * (N + 1) if engine.kind == "regression" else None
    Y[N] = terminal_values(scenario, engine)
    Z[N] = np.zeros((len(Y[N]), d, k))
    Phi[N] = np.zeros_like(Y[N])
    Psi[N] = np.zeros_like(Y[N])
    for i in range(N - 1, -1, -1):
        Y[i], Z[i], Phi[i], Psi[i], iters[i] = backward_step(engine, scenario, i, n, Y[i + 1], M)
        if coefs is not None:
            coefs[i] = engine.coefficients(i, Y[i + 1])
    flags = {}
    far = max(float(scenario.domain.distance(y).max()) for y in Y)
    if far > M / 2:
        log.warning("penalised iterate reached distance %.3g > M/2 = %.3g", far, M / 2)
        flags["distance_exceeds_half_M"] = True
    return DiscreteSolution(Y, Z, Phi, Psi, float(n), float(M), "penalized", engine,
                            scenario.grid, coefs, iters, flags)


def reflected_extraction(solution: DiscreteSolution, scenario: Scenario) -> DiscreteSolution:
    """Project ``Y`` onto the closed domain and read ``Psi`` off the discrete equation."""
    engine = solution.engine
    dt = scenario.grid.dt
    N = scenario.grid.N
    Yh = [scenario.domain.project_batch(y)[0] for y in solution.Y]
    Zh = [None] * (N + 1)
    Psih = [None] * (N + 1)
    Zh[N] = np.zeros_like(solution.Z[N])
    Psih[N] = np.zeros_like(Yh[N])
    for i in range(N):
        t = i * dt
        Zh[i] = engine.expect_dw(i, Yh[i + 1]) / dt
        E = engine.expect(i, Yh[i + 1])
        F = np.asarray(scenario.driver.f(t, engine.state(i), Yh[i], Zh[i]))
        Psih[i] = (E + dt * F - Yh[i]) / dt
    return DiscreteSolution(Yh, Zh, list(solution.Phi), Psih, solution.n, solution.M, "reflected",
                            engine, solution.grid, solution.coefficients, solution.iterations,
                            dict(solution.flags))


def cauchy_decrement(a: DiscreteSolution, b: DiscreteSolution) -> float:
    """``max_i E|Y_i^a - Y_i^b|^2`` with the engine's slice weights."""
    out = 0.0
    for i in range(len(a.Y)):
        diff = np.sum((a.Y[i] - b.Y[i]) ** 2, axis=1)
        out = max(out, float(a.weights(i) @ diff))
    return out


@dataclass
class ConvergenceReport:
    rows: list
    warning: bool
    selected_n: float
    columns: tuple = ()

    def column(self, name):
        return [r[name] for r in self.rows]


def solve_reflected(scenario: Scenario, schedule=None, engine=None, extra_rows: Callable = None):
    """Run the penalisation schedule; return ``(reflected_solution, report)``.

    The report has one row per schedule entry with the Cauchy decrement to
    the previous entry and the diagnostics of the projected solution.
    """
    schedule = tuple(scenario.schedule if schedule is None else schedule)
    if len(schedule) < 3 or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValidationError("penalisation schedule needs at least 3 increasing values",
                              assumption="penalisation schedule")
    engine = make_engine(scenario) if engine is None else engine
    M = scenario.M if scenario.M is not None else default_M(scenario, engine)
    rows = []
    prev = None
    last = None
    for n in schedule:
        t0 = _time.perf_counter()
        sol = solve_penalized(scenario, n, engine, M)
        refl = reflected_extraction(sol, scenario)
        y0 = sol.y0
        row = {
            "n": float(n),
            "dt": scenario.grid.dt,
            **{f"Y0_{j + 1}": float(y0[j]) for j in range(scenario.d)},
            "cauchy": float("nan") if prev is None else cauchy_decrement(prev, sol),
            "minimality_residual": diagnostics.minimality_check(refl, scenario.domain,
                                                                tol=2.0 / n),
            "domain_violation": diagnostics.domain_violation_check(sol, scenario.domain, M),
            "structural_K_hat": diagnostics.structural_check(sol, scenario),
            "apriori_ratio": diagnostics.apriori_check(sol, scenario),
            "reflection_mass": diagnostics.reflection_mass(sol),
        }
        log.info("n=%g solved in %.2fs", n, _time.perf_counter() - t0)
        rows.append(row)
        prev = sol
        last = refl
    dec = [r["cauchy"] for r in rows[1:]]
    # an identically zero decrement means the penalty never acted; nothing to warn about
    warning = len(dec) >= 2 and not dec[-1] < dec[-2] and dec[-1] > 0.0
    if warning:
        log.warning("Cauchy decrement did not decrease over the last refinement")
    last.flags["cauchy_warning"] = warning
    return last, ConvergenceReport(rows, warning, float(schedule[-1]), tuple(rows[0].keys()))


def with_schedule(scenario: Scenario, schedule) -> Scenario:
    """Copy of ``scenario`` with a new schedule and a grid refined for it."""
    schedule = tuple(schedule)
    return replace(scenario, schedule=schedule, grid=refined_grid(scenario.grid, schedule))

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are repeated
in an "acceptance criteria" section at the end of the pytest output.
"""
import subprocess
import sys
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from oracles import binomial_mean, brute_force_projection
from orbsde import diagnostics as dg
from orbsde.geometry import HalfspaceDomain
from orbsde.penalty import PenaltyParams, grad_phi, phi
from orbsde.reflection import build_switching_h, validate_obliqueness
from orbsde.scenarios import (counterexample_solutions, fixture_constant_push,
                              fixture_counterexample, fixture_martingale, fixture_switching,
                              push_ode_value)
from orbsde.reflection import limiting_cone_membership
from orbsde.solver import make_engine, solve_penalized, solve_reflected

ROOT = Path(__file__).resolve().parents[1]
_RUNS = {}


def random_polytope(rng, d, m):
    A = rng.standard_normal((m, d))
    b = A @ rng.standard_normal(d) - rng.uniform(0.1, 1.0, m)
    return A, b


def schedule_run(name):
    """Solve a fixture's schedule once per session; returns (fixture, sol, report, seconds)."""
    if name not in _RUNS:
        fx = {"constant-push": fixture_constant_push, "switching": fixture_switching}[name]()
        t0 = time.perf_counter()
        sol, rep = solve_reflected(fx.scenario)
        _RUNS[name] = (fx, sol, rep, time.perf_counter() - t0)
    return _RUNS[name]


def rel_change(a, b):
    den = max(abs(a), abs(b))
    return 0.0 if den == 0 else abs(a - b) / den


# ---------------------------------------------------------------------------


def test_criterion_01_penalty_closed_forms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    val_err = grad_err = 0.0
    fd_worst = 0.0
    total = checked = 0
    h = 1e-6
    while total < 10_000:
        d = int(rng.integers(1, 5))
        m = int(rng.integers(1, 7))
        A, b = random_polytope(rng, d, m)
        dom = HalfspaceDomain(A, b)
        params = PenaltyParams(float(rng.uniform(1, 100)), float(rng.uniform(0.3, 3)))
        Y = 3 * rng.standard_normal((100, d))
        total += len(Y)
        Q, dist = brute_force_projection(A, b, Y)
        n, M = params.n, params.M
        ref_phi = n * np.where(dist <= M, 0.5 * dist**2, M * dist - 0.5 * M * M)
        with np.errstate(invalid="ignore", divide="ignore"):
            ref_grad = np.where(dist[:, None] > 0,
                                n * np.minimum(dist, M)[:, None] * (Y - Q) / dist[:, None], 0.0)
        val_err = max(val_err, np.abs(phi(params, dom, Y) - ref_phi).max())
        G = grad_phi(params, dom, Y)
        grad_err = max(grad_err, np.abs(G - ref_grad).max())
        # finite differences away from the Huber seam and from changes of the active face
        act = lambda Z: (brute_force_projection(A, b, Z)[0] @ A.T - b) <= 1e-9  # noqa: E731
        base_act = act(Y)
        ok = np.abs(dist - M) > 1e-3
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            ok &= (act(Y + e) == base_act).all(axis=1) & (act(Y - e) == base_act).all(axis=1)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            fd = (phi(params, dom, Y + e) - phi(params, dom, Y - e)) / (2 * h)
            rel = np.abs(fd - G[:, k]) / np.maximum(np.abs(G[:, k]), 1.0)
            fd_worst = max(fd_worst, rel[ok].max(initial=0.0))
        checked += int(ok.sum())
    elapsed = time.perf_counter() - t0
    passed = val_err <= 1e-10 and grad_err <= 1e-10 and fd_worst <= 1e-5 and elapsed < 5
    record(1, passed, f"points={total} value_err={val_err:.2e} grad_err={grad_err:.2e} "
                      f"fd_rel={fd_worst:.2e} (on {checked} points) time={elapsed:.1f}s")
    assert passed


def test_criterion_02_projection_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 5))
        m = int(rng.integers(1, 7))
        A, b = random_polytope(rng, d, m)
        dom = HalfspaceDomain(A, b)
        Y = 3 * rng.standard_normal((8, d))
        P, dist = dom.project_batch(Y)
        Q, qd = brute_force_projection(A, b, Y)
        worst = max(worst, np.abs(P - Q).max(), np.abs(dist - qd).max())
    elapsed = time.perf_counter() - t0
    passed = worst <= 1e-8 and elapsed < 10
    record(2, passed, f"instances=1000 max_err={worst:.2e} time={elapsed:.1f}s")
    assert passed


def random_costs(rng, d):
    c = rng.uniform(0.25, 0.45, (d, d))
    np.fill_diagonal(c, 0.0)
    return c


def test_criterion_03_switching_h():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    id_err = cont_err = 0.0
    eta_min = np.inf
    facets = 0
    for d in (2, 3):
        for _ in range(4):
            sh = build_switching_h(random_costs(rng, d))
            for (l, j) in sh.pairs:
                pts = sh.sample_facet_points((l, j), 200, rng)
                if len(pts) == 0:
                    continue
                facets += 1
                H = sh.evaluate_points(pts)
                u = np.zeros(d)
                u[l], u[j] = 1.0, -1.0
                e = np.zeros(d)
                e[l] = 1.0
                id_err = max(id_err, np.abs(H @ u - e).max())
            # barycentric values on shared faces agree between neighbouring simplices
            for a, b_ in combinations(range(len(sh.simplices)), 2):
                shared = sorted(set(sh.simplices[a]) & set(sh.simplices[b_]))
                if not shared:
                    continue
                w = rng.dirichlet(np.ones(len(shared)), size=20)
                S = w @ sh.vertices[shared]
                rhs = np.hstack([S, np.ones((len(S), 1))])
                vals = []
                for k in (a, b_):
                    lam = rhs @ sh._pinvs[k].T
                    vals.append(np.einsum("pv,vij->pij", lam, sh.vertex_matrices[sh.simplices[k]]))
                cont_err = max(cont_err, np.abs(vals[0] - vals[1]).max())
            eta_hat, _ = validate_obliqueness(sh.field(), sh.domain, 100, seed=int(rng.integers(1 << 30)))
            eta_min = min(eta_min, eta_hat)
    elapsed = time.perf_counter() - t0
    passed = id_err <= 1e-10 and cont_err <= 1e-12 and eta_min > 0 and elapsed < 5
    record(3, passed, f"facets={facets} identity_err={id_err:.2e} continuity_err={cont_err:.2e} "
                      f"eta_hat_min={eta_min:.3f} time={elapsed:.1f}s")
    assert passed


def test_criterion_04_trivial_solve():
    t0 = time.perf_counter()
    fx = fixture_martingale()
    sc = fx.scenario
    sol, rep = solve_reflected(sc)
    pen = solve_penalized(sc, sc.schedule[-1], sol.engine)
    N = sc.grid.N
    wT = (2 * np.arange(N + 1) - N) * np.sqrt(sc.grid.dt)
    ref = binomial_mean(sc.terminal.g(wT[:, None]), N)
    y0_err = float(np.abs(pen.y0 - ref).max())
    phi_max = max(float(np.abs(p).max()) for p in pen.Phi)
    report = dg.full_report(pen, sc)
    zeros = {
        "minimality": report.minimality_residual,
        "domain_violation": report.domain_violation,
        "cone_violation": report.cone_violation_rate,
        "structural_K": report.structural_K_hat,
        "reflection_mass": report.reflection_mass,
        "cauchy": float(np.nanmax(rep.column("cauchy"))),
    }
    elapsed = time.perf_counter() - t0
    passed = (y0_err <= 1e-12 and phi_max == 0.0 and all(v == 0.0 for v in zeros.values())
              and report.equation_residual <= 1e-12 and elapsed < 5)
    record(4, passed, f"Y0_err={y0_err:.1e} max|Phi|={phi_max} reflection diagnostics="
                      f"{max(zeros.values())} eq_residual={report.equation_residual:.1e} "
                      f"time={elapsed:.1f}s")
    assert passed


def test_criterion_05_constant_push():
    fx, sol, rep, elapsed = schedule_run("constant-push")
    t0 = time.perf_counter()
    errs = {}
    for n in (16, 64):
        y0 = float(solve_penalized(fx.scenario, n, sol.engine).y0[0])
        ode = push_ode_value(n)
        errs[n] = (abs(y0 + 1.0 / n) * n, abs(y0 - ode) / abs(ode))
    elapsed += time.perf_counter() - t0
    n_fin = rep.selected_n
    y_hat = abs(float(sol.y0[0]))
    mono = {}
    for key in ("minimality_residual", "domain_violation"):
        col = rep.column(key)
        mono[key] = all(b <= a for a, b in zip(col, col[1:]))
    passed = (all(e1 <= 0.15 and e2 <= 0.15 for e1, e2 in errs.values())
              and y_hat <= 2.0 / n_fin and all(mono.values()) and elapsed < 30)
    record(5, passed, " ".join(f"n={n}: rel_err_vs_-1/n={e1:.1e} vs_ode={e2:.1e}"
                               for n, (e1, e2) in errs.items())
           + f" |Yhat0|={y_hat:.1e} non_increasing={mono} time={elapsed:.1f}s")
    assert passed


def test_criterion_06_switching_oracle():
    fx, sol, rep, elapsed = schedule_run("switching")
    t0 = time.perf_counter()
    V0 = fx.oracle()
    elapsed += time.perf_counter() - t0
    err = float(np.abs(sol.y0 - V0).max())
    tol = 0.05 * float(np.abs(V0).max()) + 0.01
    c = fx.scenario.domain.costs
    worst = 0.0
    for Y in sol.Y:
        for l in range(2):
            for j in range(2):
                if l != j:
                    worst = max(worst, float(np.max(Y[:, j] - c[l, j] - Y[:, l])))
    passed = err <= tol and worst <= 1e-12 and elapsed < 60
    record(6, passed, f"Y0={np.round(sol.y0, 6).tolist()} DP={np.round(V0, 6).tolist()} "
                      f"err={err:.2e} (tol {tol:.3g}) max_constraint_gap={worst:.1e} "
                      f"N={fx.scenario.grid.N} n={rep.selected_n:g} time={elapsed:.1f}s")
    assert passed


def test_criterion_07_counterexample(caplog):
    caplog.set_level("INFO", logger="orbsde")
    t0 = time.perf_counter()
    fx = fixture_counterexample()
    sc = fx.scenario
    eng = make_engine(sc)
    refs = counterexample_solutions(eng, sc.grid.T)
    residuals = [dg.equation_residual(r, sc) for r in refs]
    cone_ok = []
    for r in refs:
        ok = all(limiting_cone_membership(sc.reflection, sc.domain, i * sc.grid.dt, None, y, z, p)
                 for i in range(sc.grid.N)
                 for y, z, p in zip(r.Y[i], r.Z[i], r.Psi[i]))
        cone_ok.append(ok)
    res = fx.run()
    elapsed = time.perf_counter() - t0
    dist = min(res.info["distances"])
    logged = "selected solution" in caplog.text
    tol = 0.05 * sc.grid.T * np.sqrt(2.0)
    passed = (max(residuals) <= 1e-12 and all(cone_ok) and dist <= tol and logged
              and elapsed < 60)
    record(7, passed, f"residuals={[f'{r:.1e}' for r in residuals]} cone={cone_ok} "
                      f"selected=solution {res.info['selected']} distance={dist:.2e} "
                      f"logged={logged} time={elapsed:.1f}s")
    assert passed


def test_criterion_08_cauchy_monitor():
    verdicts = {}
    for name in ("constant-push", "switching"):
        _, _, rep, _ = schedule_run(name)
        dec = rep.column("cauchy")[1:]
        verdicts[name] = (all(b < a for a, b in zip(dec, dec[1:])), [f"{v:.2e}" for v in dec])
    passed = all(v[0] for v in verdicts.values())
    record(8, passed, "; ".join(f"{k}: {v[1]}" for k, v in verdicts.items()))
    assert passed


def test_criterion_09_uniform_bounds():
    parts = []
    passed = True
    for name in ("constant-push", "switching"):
        _, _, rep, _ = schedule_run(name)
        for key in ("structural_K_hat", "apriori_ratio", "reflection_mass"):
            col = rep.column(key)
            change = rel_change(col[-2], col[-1])
            ok = change < 0.20
            passed &= ok
            parts.append(f"{name}/{key}: {col[-2]:.3g}->{col[-1]:.3g} ({100 * change:.0f}%"
                         f"{'' if ok else ' FAIL'})")
    record(9, passed, "; ".join(parts))
    assert passed


def test_criterion_10_determinism(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        proc = subprocess.run([sys.executable, "-m", "orbsde.cli", "converge", "--scenario",
                               str(ROOT / "scenarios" / "switching.yaml"), "--out", str(out)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append((out / "convergence.csv").read_bytes())
    passed = outs[0] == outs[1] and len(outs[0]) > 0
    record(10, passed, f"two converge runs, csv bytes={len(outs[0])} identical={outs[0] == outs[1]}")
    assert passed

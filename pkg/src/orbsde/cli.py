"""Command-line front end.

    orbsde solve --scenario F --out DIR [--seed S]
    orbsde converge --scenario F [--schedule 8,16,32,64,128] [--out DIR] [--seed S]
    orbsde verify [--fixture NAME]
    orbsde diagnose --solution FILE [--out DIR]

Exit codes: 0 success, 1 invalid input (the violated assumption is named),
2 numerical failure, 3 fixture failure.  Files written with the same
scenario and seed are byte-identical; wall times are only logged.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
import zipfile
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .config import load_scenario, load_text
from .errors import DomainError, NumericalError, ValidationError
from .scenarios import FIXTURES
from .solver import DiscreteSolution, make_engine, solve_reflected, validate_scenario

log = logging.getLogger("orbsde")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_FIXTURE = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# Deterministic writers
# ---------------------------------------------------------------------------


def _clean(value):
    """JSON-ready copy with NaN/inf mapped to null and numpy scalars unwrapped."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    Path(path).write_bytes(csv_text(header, rows).encode("utf-8"))


def write_npz(path, arrays):
    """``.npz`` with fixed zip timestamps so repeated runs give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[key]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


# ---------------------------------------------------------------------------
# Report layouts
# ---------------------------------------------------------------------------

CONVERGENCE_COLUMNS = ("n", "dt", "Y0_*", "cauchy", "minimality_residual", "domain_violation",
                       "structural_K_hat", "apriori_ratio", "reflection_mass")


def convergence_header(d):
    cols = []
    for c in CONVERGENCE_COLUMNS:
        cols += [f"Y0_{j + 1}" for j in range(d)] if c == "Y0_*" else [c]
    return cols


def statistics_rows(sol, pen_distance):
    d = sol.Y[0].shape[1]
    header = ["index", "t"] + [f"Y_mean_{j + 1}" for j in range(d)] + \
        [f"Y_std_{j + 1}" for j in range(d)] + ["Z_norm_mean"] + \
        [f"Psi_mean_{j + 1}" for j in range(d)] + ["penalized_distance_mean", "nodes"]
    rows = []
    for i, t in enumerate(sol.times):
        w = sol.weights(i)
        Y = sol.Y[i]
        mean = w @ Y
        std = np.sqrt(np.maximum(w @ (Y - mean) ** 2, 0.0))
        znorm = w @ np.linalg.norm(sol.Z[i].reshape(len(Y), -1), axis=1)
        psi = w @ sol.Psi[i]
        rows.append([i, float(t), *map(float, mean), *map(float, std), float(znorm),
                     *map(float, psi), float(w @ pen_distance[i]), len(Y)])
    return header, rows


def _flatten(arrs):
    offsets = np.cumsum([0] + [len(a) for a in arrs])
    return np.concatenate([np.asarray(a).reshape(len(a), -1) for a in arrs]), offsets


def solution_arrays(sol, scenario_text, scenario):
    out = {"scenario_yaml": np.array(scenario_text), "seed": np.array(scenario.seed),
           "schedule": np.array(scenario.schedule, dtype=float), "n": np.array(sol.n),
           "M": np.array(sol.M), "N": np.array(scenario.grid.N), "T": np.array(scenario.grid.T)}
    for key in ("Y", "Z", "Phi", "Psi"):
        flat, offsets = _flatten(getattr(sol, key))
        out[key] = flat
        out["offsets"] = offsets
    return out


def load_solution(path):
    """Rebuild ``(scenario, DiscreteSolution)`` from a file written by ``solve``."""
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    required = {"scenario_yaml", "seed", "schedule", "n", "M", "offsets", "Y", "Z", "Phi", "Psi"}
    missing = required - set(arrays)
    if missing:
        raise ValidationError(f"solution file lacks {', '.join(sorted(missing))}",
                              assumption="solution file")
    scenario = load_text(str(arrays["scenario_yaml"]), seed=int(arrays["seed"]),
                         schedule=[float(v) for v in arrays["schedule"]])
    engine = make_engine(scenario)
    off = arrays["offsets"]
    d, k = scenario.d, engine.k

    def split(key, shape):
        return [arrays[key][off[i]:off[i + 1]].reshape((-1,) + shape) for i in range(len(off) - 1)]

    sol = DiscreteSolution(split("Y", (d,)), split("Z", (d, k)), split("Phi", (d,)),
                           split("Psi", (d,)), float(arrays["n"]), float(arrays["M"]),
                           "reflected", engine, scenario.grid)
    return scenario, sol


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(args):
    scenario = load_scenario(args.scenario, seed=args.seed)
    text = Path(args.scenario).read_text(encoding="utf-8")
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    engine = validate_scenario(scenario)
    sol, rep = solve_reflected(scenario, engine=engine)
    log.info("solve finished in %.2fs", time.perf_counter() - t0)
    report = dg.full_report(sol, scenario)
    last = rep.rows[-1]
    summary = {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "engine": scenario.engine,
        "T": scenario.grid.T,
        "N": scenario.grid.N,
        "dt": scenario.grid.dt,
        "d": scenario.d,
        "n": sol.n,
        "M": sol.M,
        "schedule": list(scenario.schedule),
        "Y0_penalized": [last[f"Y0_{j + 1}"] for j in range(scenario.d)],
        "Y0_reflected": sol.y0.tolist(),
        "cauchy_warning": rep.warning,
        "diagnostics": report.as_dict(),
    }
    write_json(out / "summary.json", summary)
    # |grad_phi| / n is the penalised iterate's distance to the domain, capped at M
    dist = [np.linalg.norm(p, axis=1) / sol.n for p in sol.Phi]
    header, rows = statistics_rows(sol, dist)
    write_csv(out / "statistics.csv", header, rows)
    write_npz(out / "solution.npz", solution_arrays(sol, text, scenario))
    print(json.dumps(_clean({"Y0_reflected": summary["Y0_reflected"],
                             "cauchy_warning": rep.warning}), sort_keys=True))
    return EXIT_OK


def parse_schedule(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"cannot parse schedule '{text}'", assumption="penalisation schedule") from exc
    return vals


def cmd_converge(args):
    sched = None if args.schedule is None else parse_schedule(args.schedule)
    scenario = load_scenario(args.scenario, seed=args.seed, schedule=sched)
    engine = validate_scenario(scenario)
    t0 = time.perf_counter()
    _, rep = solve_reflected(scenario, engine=engine)
    log.info("converge finished in %.2fs", time.perf_counter() - t0)
    header = convergence_header(scenario.d)
    rows = [[r[c] for c in header] for r in rep.rows]
    text = csv_text(header, rows)
    payload = {"scenario": scenario.name, "seed": scenario.seed, "N": scenario.grid.N,
               "schedule": list(scenario.schedule), "cauchy_warning": rep.warning,
               "rows": rep.rows}
    if args.out is None:
        sys.stdout.write(text)
    else:
        out = _out_dir(args.out)
        (out / "convergence.csv").write_bytes(text.encode("utf-8"))
        write_json(out / "convergence.json", payload)
    return EXIT_OK


def cmd_verify(args):
    names = list(FIXTURES) if args.fixture is None else [args.fixture]
    unknown = [n for n in names if n not in FIXTURES]
    if unknown:
        raise ValidationError(f"unknown fixture '{unknown[0]}' (known: {', '.join(FIXTURES)})",
                              assumption="fixture name")
    ok = True
    lines = [f"{'fixture':<16} {'check':<52} {'value':>12} {'limit':>12}  result"]
    for name in names:
        res = FIXTURES[name]().run()
        ok &= res.passed
        for c in res.checks:
            lines.append(f"{name:<16} {c.label:<52} {c.value:>12.4g} {c.threshold:>12.4g}  "
                         f"{'PASS' if c.passed else 'FAIL'}")
        if "selected" in res.info:
            lines.append(f"{name:<16} solver selected closed-form solution {res.info['selected']}")
        lines.append(f"{name:<16} {'PASS' if res.passed else 'FAIL'}")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_FIXTURE


def cmd_diagnose(args):
    scenario, sol = load_solution(args.solution)
    report = dg.full_report(sol, scenario)
    doc = report.as_dict()
    if args.out is not None:
        out = _out_dir(args.out)
        write_json(out / "diagnostics.json", doc)
        (out / "diagnostics.csv").write_bytes(report.to_csv().encode("utf-8"))
    print(json.dumps(_clean(doc), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="orbsde", description="Obliquely reflected BSDE solver")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve a scenario at the finest penalisation")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("converge", help="run the penalisation schedule and report convergence")
    c.add_argument("--scenario", required=True)
    c.add_argument("--schedule", help="comma-separated penalisation strengths")
    c.add_argument("--out", help="output directory (CSV to stdout when omitted)")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_converge)

    v = sub.add_parser("verify", help="run the built-in fixtures")
    v.add_argument("--fixture")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("diagnose", help="diagnostics for a stored solution")
    d.add_argument("--solution", required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        where = f" [{exc.assumption}]" if exc.assumption else ""
        print(f"validation error{where}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DomainError as exc:
        print(f"validation error [domain]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"validation error [files]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

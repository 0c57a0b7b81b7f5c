"""Scenario files (YAML) and the component registries behind them.

A scenario file has one section per component::

    name: constant-push
    seed: 0
    grid: {T: 1, N: 256}
    forward: {model: brownian, x0: [0.0], sigma: 1.0}
    domain: {type: halfspaces, normals: [[1.0]], offsets: [0.0]}
    reflection: {type: identity}
    driver: {type: constant, value: [-1.0]}
    terminal: {type: constant, value: [0.0]}
    penalty: {schedule: [8, 16, 32, 64, 128], M: 10.0}
    engine: {type: lattice}
    picard: {tol: 1.0e-11, cap: 200}

Only ``grid.T`` and ``grid.N`` accept arithmetic expressions such as
``"2**8"``; every other value must be a literal.  Custom components can be
added with :func:`register_driver`, :func:`register_terminal`,
:func:`register_forward`, :func:`register_domain` and
:func:`register_reflection`.
"""
from __future__ import annotations

import ast
import operator
import os
from pathlib import Path

import numpy as np
import yaml

from . import scenarios as fx
from .errors import ValidationError
from .forward import TimeGrid, brownian_model, gbm_model, ou_model
from .geometry import BallDomain, HalfspaceDomain, SwitchingDomain, whole_space
from .reflection import build_switching_h, counterexample_field, identity_field, matrix_field
from .solver import DEFAULT_SCHEDULE, Scenario, with_schedule

SEED_ENV = "ORBSDE_SEED"

SECTIONS = {"name", "seed", "grid", "forward", "domain", "reflection", "driver", "terminal",
            "penalty", "engine", "picard"}

# ---------------------------------------------------------------------------
# Literal helpers
# ---------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow, ast.FloorDiv: operator.floordiv}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def eval_expression(text):
    """Evaluate a purely arithmetic expression (numbers and ``+ - * / // **``)."""
    if isinstance(text, bool):
        raise ValidationError("boolean where a number was expected", assumption="time grid")
    if isinstance(text, (int, float)):
        return text
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ValidationError(f"cannot parse expression '{text}'", assumption="time grid") from exc

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return node.value
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        raise ValidationError(f"unsupported element in expression '{text}'", assumption="time grid")

    return ev(tree)


def literal_float(value, what):
    if isinstance(value, bool):
        raise ValidationError(f"{what}: expected a number", assumption=what)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)  # YAML 1.1 reads "1e-11" as a string
        except ValueError:
            pass
    raise ValidationError(f"{what}: expected a literal number, got {value!r}", assumption=what)


def literal_array(value, what, ndim=None):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{what}: expected a numeric array", assumption=what) from exc
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{what}: expected a {ndim}-d array", assumption=what)
    return arr


def _section(doc, key, required=True):
    sec = doc.get(key)
    if sec is None:
        if required:
            raise ValidationError(f"scenario file lacks the '{key}' section", assumption=key)
        return {}
    if not isinstance(sec, dict):
        raise ValidationError(f"section '{key}' must be a mapping", assumption=key)
    return dict(sec)


def _pop_type(sec, key, field_name="type"):
    kind = sec.pop(field_name, None)
    if kind is None:
        raise ValidationError(f"section '{key}' needs a '{field_name}' entry", assumption=key)
    return str(kind)


# ---------------------------------------------------------------------------
# Registries
# ---------------------------------------------------------------------------


def _forward_brownian(sec):
    x0 = literal_array(sec.get("x0", [0.0]), "forward.x0", 1)
    return brownian_model(len(x0), x0, literal_float(sec.get("sigma", 1.0), "forward.sigma"))


def _forward_gbm(sec):
    return gbm_model(literal_array(sec["mu"], "forward.mu"), literal_array(sec["sigma"], "forward.sigma"),
                     literal_array(sec["x0"], "forward.x0"))


def _forward_ou(sec):
    return ou_model(literal_float(sec["theta"], "forward.theta"), literal_array(sec["mean"], "forward.mean"),
                    literal_float(sec["sigma"], "forward.sigma"), literal_array(sec["x0"], "forward.x0"))


FORWARD = {"brownian": _forward_brownian, "gbm": _forward_gbm, "ou": _forward_ou}

DOMAINS = {
    "halfspaces": lambda s: HalfspaceDomain(literal_array(s["normals"], "domain.normals", 2),
                                            literal_array(s["offsets"], "domain.offsets", 1)),
    "switching": lambda s: SwitchingDomain(literal_array(s["costs"], "domain.costs", 2)),
    "ball": lambda s: BallDomain(literal_array(s["center"], "domain.center", 1),
                                 literal_float(s["radius"], "domain.radius")),
    "whole_space": lambda s: whole_space(int(literal_float(s["dim"], "domain.dim"))),
    "counterexample": lambda s: fx.counterexample_domain(),
}


def _reflection_switching(sec, domain):
    if not isinstance(domain, SwitchingDomain):
        raise ValidationError("switching reflection needs a switching domain",
                              assumption="reflection field")
    return build_switching_h(domain.costs).field()


REFLECTIONS = {
    "identity": lambda s, dom: identity_field(dom.dim),
    "matrix": lambda s, dom: matrix_field(literal_array(s["matrix"], "reflection.matrix", 2),
                                          None if "eta" not in s else literal_float(s["eta"], "reflection.eta")),
    "switching": _reflection_switching,
    "counterexample": lambda s, dom: counterexample_field(dom),
}

DRIVERS = {
    "zero": lambda s, d: fx.zero_driver(d),
    "constant": lambda s, d: fx.constant_driver(literal_array(s["value"], "driver.value", 1)),
    "linear": lambda s, d: fx.linear_driver(literal_array(s["A"], "driver.A", 2),
                                            literal_array(s.get("b", np.zeros(d)), "driver.b", 1)),
    "cubic_z": lambda s, d: fx.cubic_z_driver(literal_float(s.get("cap", fx.CUBIC_Z_CAP), "driver.cap")),
}

TERMINALS = {
    "constant": lambda s, d: fx.constant_terminal(literal_array(s["value"], "terminal.value", 1)),
    "tanh": lambda s, d: fx.tanh_terminal(literal_array(s["offset"], "terminal.offset", 1),
                                          literal_array(s["scale"], "terminal.scale"),
                                          literal_array(s.get("shift", 0.0), "terminal.shift")),
    "embed": lambda s, d: fx.embed_terminal(d, int(literal_float(s["component"], "terminal.component"))),
}


def register_forward(name, factory):
    """``factory(section_dict) -> ForwardModel``."""
    FORWARD[name] = factory


def register_domain(name, factory):
    """``factory(section_dict) -> ConvexDomain``."""
    DOMAINS[name] = factory


def register_reflection(name, factory):
    """``factory(section_dict, domain) -> ReflectionField``."""
    REFLECTIONS[name] = factory


def register_driver(name, factory):
    """``factory(section_dict, d) -> DriverSpec``."""
    DRIVERS[name] = factory


def register_terminal(name, factory):
    """``factory(section_dict, d) -> TerminalSpec``."""
    TERMINALS[name] = factory


def _build(registry, kind, key, *args):
    if kind not in registry:
        raise ValidationError(f"unknown {key} type '{kind}' (known: {', '.join(sorted(registry))})",
                              assumption=key)
    try:
        return registry[kind](*args)
    except KeyError as exc:
        raise ValidationError(f"{key} '{kind}' is missing the entry {exc}", assumption=key) from exc


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def resolve_seed(file_seed, override=None):
    if override is not None:
        return int(override)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ValidationError(f"{SEED_ENV} must be an integer", assumption="seed") from exc
    return int(file_seed)


def scenario_from_dict(doc, seed=None, schedule=None) -> Scenario:
    if not isinstance(doc, dict):
        raise ValidationError("scenario file must be a mapping", assumption="scenario file")
    unknown = set(doc) - SECTIONS
    if unknown:
        raise ValidationError(f"unknown scenario sections: {', '.join(sorted(unknown))}",
                              assumption="scenario file")
    grid_sec = _section(doc, "grid")
    T = float(eval_expression(grid_sec.get("T", 1.0)))
    N_val = eval_expression(grid_sec.get("N", 64))
    if float(N_val) != int(N_val):
        raise ValidationError("grid.N must evaluate to an integer", assumption="time grid")
    grid = TimeGrid(T, int(N_val))

    fwd = _section(doc, "forward")
    model = _build(FORWARD, _pop_type(fwd, "forward", "model"), "forward", fwd)

    dom_sec = _section(doc, "domain")
    domain = _build(DOMAINS, _pop_type(dom_sec, "domain"), "domain", dom_sec)
    d = domain.dim

    ref_sec = _section(doc, "reflection")
    field_ = _build(REFLECTIONS, _pop_type(ref_sec, "reflection"), "reflection", ref_sec, domain)

    drv_sec = _section(doc, "driver")
    driver = _build(DRIVERS, _pop_type(drv_sec, "driver"), "driver", drv_sec, d)
    term_sec = _section(doc, "terminal")
    terminal = _build(TERMINALS, _pop_type(term_sec, "terminal"), "terminal", term_sec, d)

    pen = _section(doc, "penalty", required=False)
    sched = pen.get("schedule", list(DEFAULT_SCHEDULE)) if schedule is None else schedule
    sched = tuple(literal_float(n, "penalty.schedule") for n in sched)
    M = None if pen.get("M") is None else literal_float(pen["M"], "penalty.M")

    eng = _section(doc, "engine", required=False)
    pic = _section(doc, "picard", required=False)
    sc = Scenario(
        grid=grid, model=model, driver=driver, terminal=terminal, domain=domain,
        reflection=field_, schedule=sched, M=M,
        engine=str(eng.get("type", "lattice")),
        degree=int(literal_float(eng.get("degree", 2), "engine.degree")),
        path_count=int(literal_float(eng.get("paths", 10_000), "engine.paths")),
        picard_tol=literal_float(pic.get("tol", 1e-11), "picard.tol"),
        picard_cap=int(literal_float(pic.get("cap", 200), "picard.cap")),
        seed=resolve_seed(doc.get("seed", 0), seed),
        name=str(doc.get("name", "scenario")),
        config=doc,
    )
    return with_schedule(sc, sched)


def load_text(text, seed=None, schedule=None) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"scenario file is not valid YAML: {exc}", assumption="scenario file") from exc
    return scenario_from_dict(doc, seed, schedule)


def load_scenario(path, seed=None, schedule=None) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"scenario file '{path}' does not exist", assumption="scenario file")
    return load_text(path.read_text(encoding="utf-8"), seed, schedule)

"""Session configuration (JSON) and the arithmetic expression language.

Expressions cover boundary data, base flows, sources and initial
conditions: variables x, y, t; constants PI and E; operators + - * / ^
(with ^ binding tightest and right-associative, then unary minus, then
* /, then + -); functions sin cos tan exp log sqrt abs tanh.  Evaluation
is pure and vectorises over numpy arrays.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

FUNCTIONS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh,
}
CONSTANTS = {"PI": math.pi, "E": math.e}
VARIABLES = ("x", "y", "t")


class ExpressionError(ValueError):
    pass


class SessionError(ValueError):
    pass


_TOKEN = re.compile(r"""
    (?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
  | (?P<ws>\s+)
""", re.VERBOSE)


def _tokenize(text):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ExpressionError(f"syntax error at column {pos + 1}: "
                                  f"unexpected character {text[pos]!r}")
        if m.lastgroup != "ws":
            out.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, tokens, names):
        self.tokens = tokens
        self.k = 0
        self.names = names

    def peek(self):
        return self.tokens[self.k]

    def next(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect_op(self, op):
        kind, text, pos = self.next()
        if kind != "op" or text != op:
            raise ExpressionError(
                f"syntax error at column {pos + 1}: expected {op!r}")

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionError(
                f"syntax error at column {pos + 1}: unexpected {text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.next()[1]
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = self.next()[1]
            node = ("bin", op, node, self.factor())
        return node

    def factor(self):
        if self.peek()[:2] == ("op", "-"):
            self.next()
            return ("neg", self.factor())
        return self.power()

    def power(self):
        node = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.next()
            node = ("bin", "^", node, self.factor())   # right-associative
        return node

    def atom(self):
        kind, text, pos = self.next()
        if kind == "num":
            return ("num", float(text))
        if kind == "ident":
            if text in FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return ("call", text, arg)
            if text in CONSTANTS or text in VARIABLES or text in self.names:
                return ("var", text)
            raise ExpressionError(
                f"unknown identifier {text!r} at column {pos + 1}")
        if (kind, text) == ("op", "("):
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExpressionError(
            f"syntax error at column {pos + 1}: unexpected {text or 'end'!r}")


def _prec(node):
    tag = node[0]
    if tag in ("num", "var", "call"):
        return 5
    if tag == "neg":
        return 3
    return {"^": 4, "*": 2, "/": 2, "+": 1, "-": 1}[node[1]]


def _show(node):
    tag = node[0]
    if tag == "num":
        v = node[1]
        return format(v, ".17g")
    if tag == "var":
        return node[1]
    if tag == "call":
        return f"{node[1]}({_show(node[2])})"
    if tag == "neg":
        inner = _show(node[1])
        if _prec(node[1]) < 3:
            inner = f"({inner})"
        return f"-{inner}"
    op, a, b = node[1], node[2], node[3]
    p = _prec(node)
    lhs, rhs = _show(a), _show(b)
    if op == "^":
        if _prec(a) < 5:
            lhs = f"({lhs})"
        if _prec(b) < 3:
            rhs = f"({rhs})"
    else:
        if _prec(a) < p:
            lhs = f"({lhs})"
        if _prec(b) <= p:
            rhs = f"({rhs})"
    return f"{lhs}{op}{rhs}"


def _eval(node, env):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        name = node[1]
        if name in env:
            return env[name]
        if name in CONSTANTS:
            return CONSTANTS[name]
        raise ExpressionError(f"identifier {name!r} has no value")
    if tag == "call":
        return FUNCTIONS[node[1]](_eval(node[2], env))
    if tag == "neg":
        return -_eval(node[1], env)
    op, a, b = node[1], node[2], node[3]
    va, vb = _eval(a, env), _eval(b, env)
    if op == "+":
        return va + vb
    if op == "-":
        return va - vb
    if op == "*":
        return va * vb
    if op == "/":
        return va / vb
    return va ** vb


@dataclass(frozen=True)
class Expression:
    source: str
    ast: tuple
    params: tuple = ()          # (name, value) pairs bound at parse time

    def __call__(self, x=0.0, y=0.0, t=0.0):
        env = dict(self.params)
        env.update(x=x, y=y, t=t)
        return _eval(self.ast, env)

    def pretty(self):
        return _show(self.ast)


def parse_expr(text, names=(), params=None) -> Expression:
    """Parse an expression; identifiers outside {x, y, t, PI, E}, the
    function set and `names` raise with the offending column."""
    params = dict(params or {})
    allowed = set(names) | set(params)
    ast = _Parser(_tokenize(text), allowed).parse()
    return Expression(text, ast, tuple(sorted(params.items())))


def eval_expr(expr: Expression, x=0.0, y=0.0, t=0.0):
    return expr(x=x, y=y, t=t)


# ---------------------------------------------------------------------------
# session files
# ---------------------------------------------------------------------------

SOLVER_KINDS = ("project", "helmholtz", "advect", "ape")
BC_TYPES = ("dirichlet", "periodic", "rigid_wall", "farfield")
COLLECTION_DEFAULTS = ("auto", "stdmat", "iterperexp", "sumfac")


@dataclass
class Session:
    path: str
    mesh_path: str
    mesh: object
    params: dict
    orders: dict                 # (kind, id) -> order
    num_points: int | None
    solver: dict
    fields: dict                 # variable -> Expression (initial condition)
    base_flow: dict              # name -> Expression
    sources: dict                # variable -> Expression
    expression: object           # projection target (project solver)
    velocity: tuple              # advection velocity Expressions
    bcs: dict                    # boundary name -> {"type": ..., ...}
    collections_default: str
    filters: list
    adaptivity: dict | None
    derived: dict = field(default_factory=dict)


def _err(path, message):
    raise SessionError(f"{path}: {message}")


def parse_session(path, overrides=None) -> Session:
    """Load and fully validate a session file; `overrides` replaces
    top-level numeric parameters (CLI --param)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SessionError(f"session file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SessionError(f"{path}: invalid JSON: {exc}")

    if not isinstance(doc, dict):
        _err("$", "session must be a JSON object")
    if "mesh" not in doc:
        _err("$.mesh", "missing mesh path")

    from .meshio import read_mesh

    base_dir = os.path.dirname(os.path.abspath(path))
    mesh_path = os.path.join(base_dir, doc["mesh"])
    mesh = read_mesh(mesh_path)

    params = dict(doc.get("params", {}))
    for k, v in params.items():
        if not isinstance(v, (int, float)):
            _err(f"$.params.{k}", "parameters must be numeric")
    for k, v in (overrides or {}).items():
        params[k] = float(v)

    def expr_of(text, where):
        try:
            return parse_expr(str(text), params=params)
        except ExpressionError as exc:
            _err(where, str(exc))

    # expansions -> per-element order table
    orders = {}
    expansions = doc.get("expansions", [{"composites": "domain", "order": 3}])
    if not isinstance(expansions, list):
        _err("$.expansions", "must be a list")
    for n, spec in enumerate(expansions):
        where = f"$.expansions[{n}]"
        comps = spec.get("composites", "domain")
        if comps == "domain":
            comps = list(mesh.domain)
        order = spec.get("order")
        per_elem = spec.get("orders", {})
        for cid in comps:
            if cid not in mesh.composites:
                _err(where, f"unknown composite {cid}")
            kind, ids = mesh.composites[cid]
            if kind == "seg":
                _err(where, f"composite {cid} holds segments, not elements")
            for eid in ids:
                p = per_elem.get(str(eid), order)
                if p is None:
                    _err(where, f"no order given for {kind} {eid}")
                if not (1 <= int(p) <= 32):
                    _err(where, f"order {p} outside [1, 32]")
                orders[(kind, eid)] = int(p)
    num_points = doc.get("points")

    solver = dict(doc.get("solver", {"kind": "project"}))
    if solver.get("kind") not in SOLVER_KINDS:
        _err("$.solver.kind", f"unknown solver kind {solver.get('kind')!r}; "
             f"expected one of {SOLVER_KINDS}")
    if "dt" in solver and not solver["dt"] > 0:
        _err("$.solver.dt", "dt must be positive")
    if "steps" in solver and int(solver["steps"]) < 0:
        _err("$.solver.steps", "steps must be nonnegative")
    if solver.get("riemann", "upwind") not in ("upwind", "laxfriedrichs"):
        _err("$.solver.riemann", f"unknown flux kind {solver.get('riemann')!r}")

    fields = {var: expr_of(text, f"$.fields.{var}")
              for var, text in doc.get("fields", {}).items()}
    base_flow = {name: expr_of(text, f"$.base_flow.{name}")
                 for name, text in doc.get("base_flow", {}).items()}
    sources = {var: expr_of(text, f"$.sources.{var}")
               for var, text in doc.get("sources", {}).items()}
    expression = (expr_of(doc["expression"], "$.expression")
                  if "expression" in doc else None)
    velocity = tuple(expr_of(v, f"$.velocity[{i}]")
                     for i, v in enumerate(doc.get("velocity", [])))

    bcs = {}
    for name, spec in doc.get("bcs", {}).items():
        where = f"$.bcs.{name}"
        if name not in mesh.boundary:
            _err(where, f"unknown boundary region {name!r}")
        if not isinstance(spec, dict) or spec.get("type") not in BC_TYPES:
            _err(where, f"bc type must be one of {BC_TYPES}")
        out = dict(spec)
        if spec["type"] == "dirichlet":
            out["value"] = expr_of(spec.get("value", "0"), where + ".value")
        if spec["type"] == "periodic":
            if spec.get("pair") not in mesh.boundary:
                _err(where + ".pair", f"unknown pair region {spec.get('pair')!r}")
        bcs[name] = out

    collections_default = doc.get("collections", {}).get("default", "auto")
    if collections_default not in COLLECTION_DEFAULTS:
        _err("$.collections.default",
             f"must be one of {COLLECTION_DEFAULTS}")

    filters = []
    for n, spec in enumerate(doc.get("filters", [])):
        where = f"$.filters[{n}]"
        every = int(spec.get("every", 0))
        if every < 1:
            _err(where + ".every", "output cadence must be >= 1")
        fmt = spec.get("format", "nfj")
        if fmt not in ("nfj", "vtk"):
            _err(where + ".format", f"unknown format {fmt!r}")
        filters.append({"every": every, "path": spec.get("path", "out"),
                        "format": fmt, "fields": spec.get("fields")})

    adaptivity = doc.get("adaptivity")
    if adaptivity is not None:
        for key in ("every", "hi", "lo", "p_min", "p_max"):
            if key not in adaptivity:
                _err(f"$.adaptivity.{key}", "missing")
        if adaptivity["lo"] > adaptivity["hi"]:
            _err("$.adaptivity", "lo threshold exceeds hi")

    derived = {}
    if all(k in params for k in ("Gamma", "r0", "c")):
        derived["Ma_r"] = params["Gamma"] / (4 * math.pi * params["r0"]
                                             * params["c"])
        derived["omega"] = params["Gamma"] / (4 * math.pi * params["r0"] ** 2)

    return Session(path, mesh_path, mesh, params, orders, num_points, solver,
                   fields, base_flow, sources, expression, velocity, bcs,
                   collections_default, filters, adaptivity, derived)

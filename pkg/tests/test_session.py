import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spechp.meshio import single_quad_mesh, structured_quad_mesh, write_mesh
from spechp.session import (
    ExpressionError,
    SessionError,
    eval_expr,
    parse_expr,
    parse_session,
)

# ---------------------------------------------------------------------------
# expressions
# ---------------------------------------------------------------------------


def test_constant_zero():
    e = parse_expr("0")
    assert eval_expr(e, x=3.0, y=-1.0, t=9.0) == 0.0


def test_sin_pi_x():
    e = parse_expr("sin(PI*x)")
    assert eval_expr(e, x=0.5) == pytest.approx(1.0)


def test_power_right_associative():
    # oracle with explicit parenthesisation
    assert eval_expr(parse_expr("2^3^2")) == eval_expr(parse_expr("2^(3^2)"))
    assert eval_expr(parse_expr("2^3^2")) == 512.0


def test_precedence_golden_table():
    cases = {
        "1+2*3": 7.0,
        "(1+2)*3": 9.0,
        "2*3^2": 18.0,
        "-2^2": -4.0,
        "2^-1": 0.5,
        "6/3/2": 1.0,
        "1-2-3": -4.0,
        "-x^2": -9.0,
        "abs(-3)+sqrt(4)": 5.0,
        "2--3": 5.0,
        "tanh(0)": 0.0,
    }
    for text, expected in cases.items():
        assert eval_expr(parse_expr(text), x=3.0) == pytest.approx(expected), text


def test_vectorized_eval():
    e = parse_expr("x*y + t")
    x = np.array([1.0, 2.0])
    out = e(x=x, y=np.array([3.0, 4.0]), t=1.0)
    assert out == pytest.approx([4.0, 9.0])


def test_syntax_error_carries_column():
    with pytest.raises(ExpressionError, match="column 5"):
        parse_expr("1+2*$")
    with pytest.raises(ExpressionError, match="column"):
        parse_expr("sin(x")


def test_unknown_identifier():
    with pytest.raises(ExpressionError, match="bogus"):
        parse_expr("1 + bogus")
    e = parse_expr("1 + gamma", params={"gamma": 2.5})
    assert eval_expr(e) == 3.5


def test_pretty_print_idempotent_examples():
    for text in ["1+2*3", "-(x+y)^2", "2^3^2", "sin(PI*x)*cos(y)/2",
                 "-x^2+3", "x/(y*t)", "1-(2-3)"]:
        e = parse_expr(text)
        once = e.pretty()
        twice = parse_expr(once).pretty()
        assert once == twice, text
        assert eval_expr(parse_expr(once), x=0.3, y=0.7, t=1.1) == pytest.approx(
            eval_expr(e, x=0.3, y=0.7, t=1.1))


# oracle evaluator for the fuzz test: walks the same AST tuples but is an
# independent, minimal implementation
def oracle_eval(node, env):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        return {**{"PI": math.pi, "E": math.e}, **env}[node[1]]
    if tag == "call":
        fn = {"sin": math.sin, "cos": math.cos, "tan": math.tan,
              "exp": math.exp, "log": math.log, "sqrt": math.sqrt,
              "abs": abs, "tanh": math.tanh}[node[1]]
        return fn(oracle_eval(node[2], env))
    if tag == "neg":
        return -oracle_eval(node[1], env)
    op, a, b = node[1], node[2], node[3]
    va, vb = oracle_eval(a, env), oracle_eval(b, env)
    if op == "+":
        return va + vb
    if op == "-":
        return va - vb
    if op == "*":
        return va * vb
    if op == "/":
        return va / vb if vb else float("nan")
    return va**vb


@st.composite
def expr_trees(draw, depth=0):
    if depth >= 4 or draw(st.booleans()):
        choice = draw(st.integers(0, 2))
        if choice == 0:
            return format(draw(st.floats(0.1, 9.9)), ".3f")
        if choice == 1:
            return draw(st.sampled_from(["x", "y", "t", "PI"]))
        return f"({draw(expr_trees(depth=depth + 1))})"
    kind = draw(st.integers(0, 2))
    a = draw(expr_trees(depth=depth + 1))
    b = draw(expr_trees(depth=depth + 1))
    if kind == 0:
        op = draw(st.sampled_from(["+", "-", "*", "/"]))
        return f"{a}{op}{b}"
    if kind == 1:
        fn = draw(st.sampled_from(["sin", "cos", "tanh", "abs", "exp"]))
        return f"{fn}({a})"
    return f"-({a})"


@settings(max_examples=150, deadline=None)
@given(expr_trees())
def test_fuzz_parser_matches_oracle(text):
    from hypothesis import assume

    e = parse_expr(text)
    env = {"x": 0.37, "y": -1.2, "t": 2.5}
    with np.errstate(all="ignore"):
        mine = eval_expr(e, **env)
    try:
        ref = oracle_eval(e.ast, env)
    except OverflowError:
        assume(False)   # outside double range; nothing to compare
        return
    if math.isfinite(ref) and abs(ref) < 1e12:
        assert mine == pytest.approx(ref, rel=1e-12, abs=1e-12)
    # round trip through the printer preserves value
    with np.errstate(all="ignore"):
        again = eval_expr(parse_expr(e.pretty()), **env)
    if math.isfinite(mine) and abs(mine) < 1e12:
        assert again == pytest.approx(mine, rel=1e-12, abs=1e-12)
    assert parse_expr(e.pretty()).pretty() == e.pretty()


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------


def write_session(tmp_path, doc, mesh=None, name="session.json"):
    mesh = mesh if mesh is not None else single_quad_mesh()
    write_mesh(mesh, tmp_path / "mesh.nmj")
    doc = {"mesh": "mesh.nmj", **doc}
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_minimal_projection_session(tmp_path):
    path = write_session(tmp_path, {
        "expansions": [{"composites": [0], "order": 7}],
        "solver": {"kind": "project"},
        "expression": "cos(x)*cos(y)",
    })
    ses = parse_session(path)
    assert ses.orders[("quad", 0)] == 7
    assert ses.expression is not None
    assert ses.solver["kind"] == "project"


def test_missing_composite_named(tmp_path):
    path = write_session(tmp_path, {
        "expansions": [{"composites": [42], "order": 3}],
    })
    with pytest.raises(SessionError, match="42"):
        parse_session(path)


def test_unknown_solver_kind(tmp_path):
    path = write_session(tmp_path, {"solver": {"kind": "navier"}})
    with pytest.raises(SessionError, match=r"\$\.solver\.kind"):
        parse_session(path)


def test_bad_order_rejected(tmp_path):
    path = write_session(tmp_path, {
        "expansions": [{"composites": [0], "order": 40}]})
    with pytest.raises(SessionError, match="outside"):
        parse_session(path)


def test_unknown_bc_region(tmp_path):
    path = write_session(tmp_path, {
        "bcs": {"nowhere": {"type": "dirichlet", "value": "0"}}})
    with pytest.raises(SessionError, match="nowhere"):
        parse_session(path)


def test_param_overrides(tmp_path):
    path = write_session(tmp_path, {
        "params": {"amp": 2.0},
        "fields": {"p": "amp*x"},
    })
    ses = parse_session(path, overrides={"amp": 5.0})
    assert ses.fields["p"](x=1.0) == pytest.approx(5.0)


def test_vortex_pair_session_echoes_mach(tmp_path):
    c = 60.0
    gamma = 0.0795 * 4 * math.pi * c * 1.0
    mesh = structured_quad_mesh(4, 4, x0=-100, y0=-100, x1=100, y1=100)
    path = write_session(tmp_path, {
        "params": {"Gamma": gamma, "r0": 1.0, "c": c},
        "expansions": [{"composites": [0], "order": 5}],
        "solver": {"kind": "ape", "dt": 1e-3, "steps": 10},
        "base_flow": {"ux": "0", "uy": "0", "rho": "1", "c2": str(c * c)},
        "bcs": {name: {"type": "farfield"}
                for name in ("south", "east", "north", "west")},
    }, mesh=mesh)
    ses = parse_session(path)
    assert round(ses.derived["Ma_r"], 4) == 0.0795


def test_per_element_order_table(tmp_path):
    mesh = structured_quad_mesh(2, 1)
    path = write_session(tmp_path, {
        "expansions": [{"composites": [0], "order": 2, "orders": {"1": 4}}],
    }, mesh=mesh)
    ses = parse_session(path)
    assert ses.orders[("quad", 0)] == 2
    assert ses.orders[("quad", 1)] == 4


def test_collections_default_validated(tmp_path):
    path = write_session(tmp_path, {"collections": {"default": "magic"}})
    with pytest.raises(SessionError, match="collections"):
        parse_session(path)

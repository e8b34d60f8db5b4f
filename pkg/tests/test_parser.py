import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvxc.errors import ArityMismatch, DslSyntaxError, ParseError, UnknownIdentifier
from cvxc.expr import SCALAR, Apply, Const, Constraint, Param, Problem, Var, VarDecl, matrix
from cvxc.parser import format_float, parse_expr, parse_problem, print_expr, print_problem, tokenize

SO1 = """optimization (x y : ℝ)
  maximize sqrt (x - y)
  subject to
    c1 : y = 2*x - 3
    c2 : x^2 ≤ 2
    c3 : 0 ≤ x - y
"""


class TestParse:
    def test_worked_example(self):
        p = parse_problem(SO1)
        assert [d.name for d in p.vars] == ["x", "y"]
        assert p.sense == "maximize"
        assert [c.name for c in p.constraints] == ["c1", "c2", "c3"]
        assert p.constraints[0].body == Apply("eq", (Var("y"), parse_expr("2*x - 3", vars=["x"])))

    def test_single_cone_constraint(self):
        p = parse_problem("optimization (x : R) minimize x subject to c : posOrthCone x")
        assert len(p.vars) == 1
        assert p.constraints[0].body == Apply("posOrthCone", (Var("x"),))

    def test_parameter(self):
        p = parse_problem(
            "parameters (a : R)\noptimization (x y : R)\n  minimize x\n  subject to\n    c1 : y = a*x - 3\n"
        )
        assert [d.name for d in p.params] == ["a"]
        assert Param("a") in _nodes(p.constraints[0].body)

    def test_assumptions(self):
        p = parse_problem(
            "parameters (b : R)\nassuming\n  hb : 0 < b\noptimization (x : R)\n  minimize b * x\n"
        )
        assert p.assumptions[0].name == "hb"

    def test_precedence(self):
        assert parse_expr("2*x - 3", vars=["x"]) == Apply("sub", (Apply("mul", (Const(2), Var("x"))), Const(3)))
        rel = parse_expr("x^2 <= 2", vars=["x"])
        assert rel == Apply("le", (Apply("pow", (Var("x"), Const(2))), Const(2)))

    def test_application_binds_tighter_than_infix(self):
        assert parse_expr("exp x + 1", vars=["x"]) == Apply("add", (Apply("exp", (Var("x"),)), Const(1)))

    def test_unicode_and_ascii_agree(self):
        a = parse_expr("∑ v ≤ 1", vars=["v"])
        b = parse_expr("sum v <= 1", vars=["v"])
        assert a == b

    def test_ge_flips(self):
        assert parse_expr("x >= 1", vars=["x"]) == Apply("le", (Const(1), Var("x")))

    def test_strict_inequality_parses(self):
        assert parse_expr("0 < x", vars=["x"]).op == "lt"

    def test_vector_literal(self):
        e = parse_expr("rotatedSoCone 0.5 (x - y) ![t]", vars=["x", "y", "t"])
        assert e.op == "rotatedSoCone"

    def test_matrix_declaration(self):
        p = parse_problem("optimization (S : matrix 2)\n  maximize log (det S)\n  subject to\n    h : posDef S\n")
        assert p.vars[0].shape == matrix(2)

    def test_R_is_usable_as_a_name(self):
        p = parse_problem("optimization (R : matrix 2)\n  minimize trace R\n")
        assert p.vars[0].name == "R"


class TestErrors:
    def test_syntax_error_span(self):
        with pytest.raises(DslSyntaxError) as info:
            parse_problem("optimization (x : R)\n  minimize x +\n")
        assert (info.value.span.line, info.value.span.column) == (3, 1)
        assert info.value.expected == ["expression"]

    def test_unknown_identifier(self):
        with pytest.raises(UnknownIdentifier) as info:
            parse_problem("optimization (x : R)\n  minimize x + z\n")
        assert info.value.span.line == 2

    def test_arity(self):
        with pytest.raises(ArityMismatch):
            parse_problem("optimization (x : R)\n  minimize x\n  subject to\n    c : expCone x 1\n")

    def test_empty_input(self):
        with pytest.raises(ParseError):
            parse_problem("")

    def test_duplicate_declaration(self):
        with pytest.raises(ParseError):
            parse_problem("optimization (x x : R)\n  minimize x\n")

    def test_constraint_must_be_relation(self):
        with pytest.raises(DslSyntaxError):
            parse_problem("optimization (x : R)\n  minimize x\n  subject to\n    c : x + 1\n")


class TestPrint:
    def test_round_trip_worked_example(self):
        p = parse_problem(SO1)
        assert parse_problem(print_problem(p)) == p

    def test_no_constraints_no_subject_to(self):
        text = print_problem(parse_problem("optimization (x : R)\n  minimize x\n"))
        assert "subject to" not in text

    def test_canonical_text(self):
        assert print_problem(parse_problem(SO1)) == (
            "optimization (x y : R)\n"
            "  maximize sqrt (x - y)\n"
            "  subject to\n"
            "    c1 : y = 2 * x - 3\n"
            "    c2 : x^2 <= 2\n"
            "    c3 : 0 <= x - y\n"
        )

    def test_format_float(self):
        assert format_float(2.0) == "2"
        assert format_float(0.1) == "0.1"
        assert format_float(-3.5) == "-3.5"

    def test_tokens(self):
        toks = [(t.kind, t.text) for t in tokenize("x ≤ 2")]
        assert toks == [("ident", "x"), ("sym", "≤"), ("num", "2"), ("eof", "")]


def _nodes(e):
    out = [e]
    for a in getattr(e, "args", ()):
        out += _nodes(a)
    return out


# -- generated round trips --------------------------------------------------

VARS = ["x", "y", "z"]
atoms1 = st.sampled_from(["exp", "log", "sqrt", "abs", "neg"])
nums = st.one_of(
    st.integers(0, 20).map(float),
    st.floats(0, 100, allow_nan=False, allow_infinity=False),
    st.floats(-100, 100, allow_nan=False, allow_infinity=False),
)


def exprs():
    leaf = st.one_of(st.sampled_from(VARS).map(Var), nums.map(Const))

    def extend(inner):
        binop = st.sampled_from(["add", "sub", "mul", "div"])
        return st.one_of(
            st.tuples(binop, inner, inner).map(lambda t: Apply(t[0], (t[1], t[2]))),
            st.tuples(atoms1, inner).map(lambda t: Apply(t[0], (t[1],))),
            st.tuples(inner, st.integers(1, 4)).map(lambda t: Apply("pow", (t[0], Const(float(t[1]))))),
        )

    return st.recursive(leaf, extend, max_leaves=10)


def relations():
    return st.tuples(st.sampled_from(["le", "eq", "lt"]), exprs(), exprs()).map(lambda t: Apply(t[0], (t[1], t[2])))


@settings(max_examples=200, deadline=None)
@given(exprs())
def test_expr_round_trip(e):
    assert parse_expr(print_expr(e), vars=VARS) == e


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["minimize", "maximize"]), exprs(), st.lists(relations(), max_size=4))
def test_problem_round_trip(sense, obj, cons):
    p = Problem(
        tuple(VarDecl(n, SCALAR) for n in VARS),
        obj,
        tuple(Constraint(f"c{i}", c) for i, c in enumerate(cons)),
        sense,
    )
    assert parse_problem(print_problem(p)) == p

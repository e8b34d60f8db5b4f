import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvxc.errors import DomainError, ModelError, ShapeError, UnknownName, UnboundParameter
from cvxc.expr import (
    SCALAR,
    Apply,
    Const,
    Param,
    Problem,
    Var,
    VarDecl,
    affine_form,
    bind_params,
    coords_of,
    evaluate,
    evaluate_batch,
    matrix,
    normalize_sense,
    shape_of,
    vector,
)
from cvxc.parser import parse_expr, parse_problem


def ex(text, names=("x", "y")):
    return parse_expr(text, vars=list(names))


class TestEvaluate:
    def test_so1_optimal_value(self):
        assert evaluate(ex("sqrt (x - y)"), {"x": -1.414214, "y": -5.828427}) == pytest.approx(2.101003, abs=1e-6)

    def test_identity(self):
        assert evaluate(Var("x"), {"x": 3.0}) == 3.0

    def test_exp_plus_log(self):
        assert evaluate(ex("exp x + log x", ["x"]), {"x": 1.0}) == pytest.approx(math.e, abs=1e-15)

    def test_unknown_name(self):
        with pytest.raises(UnknownName):
            evaluate(ex("x + y"), {"x": 1.0})

    def test_domain_error_carries_path(self):
        with pytest.raises(DomainError) as info:
            evaluate(ex("x + log (y - 2)"), {"x": 0.0, "y": 1.0})
        assert info.value.path == "2"

    def test_sqrt_of_negative(self):
        with pytest.raises(DomainError):
            evaluate(ex("sqrt x", ["x"]), {"x": -1.0})

    def test_relations_use_feasibility_tolerance(self):
        c = ex("x <= 1", ["x"])
        assert evaluate(c, {"x": 1.0 + 5e-7})
        assert not evaluate(c, {"x": 1.0 + 2e-6})

    def test_deterministic(self):
        e = ex("exp (x * y) + sqrt (abs (x - y)) / 3")
        a = {"x": 0.3, "y": -1.7}
        assert evaluate(e, a) == evaluate(e, a)

    def test_matrix_functions(self):
        S = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert evaluate(parse_expr("log (det S)", vars=["S"]), {"S": S}) == pytest.approx(math.log(1.75))
        assert evaluate(parse_expr("trace S", vars=["S"]), {"S": S}) == 3.0
        assert np.allclose(evaluate(parse_expr("inv S", vars=["S"]), {"S": S}), np.linalg.inv(S))

    def test_cone_semantics(self):
        rsoc = parse_expr("rotatedSoCone 0.5 (x - y) ![t]", vars=["x", "y", "t"])
        assert evaluate(rsoc, {"x": 3.0, "y": 0.0, "t": 1.7})
        assert not evaluate(rsoc, {"x": 3.0, "y": 0.0, "t": 1.8})
        expc = parse_expr("expCone t 1 x", vars=["t", "x"])
        assert evaluate(expc, {"t": 0.0, "x": 1.0})
        assert not evaluate(expc, {"t": 0.1, "x": 1.0})
        soc = parse_expr("soCone t ![x, y]", vars=["t", "x", "y"])
        assert evaluate(soc, {"t": 5.0, "x": 3.0, "y": 4.0})
        assert not evaluate(soc, {"t": 4.9, "x": 3.0, "y": 4.0})
        psd = parse_expr("psdCone S", vars=["S"])
        assert evaluate(psd, {"S": np.array([[1.0, 1.0], [1.0, 1.0]])})
        assert not evaluate(psd, {"S": np.array([[1.0, 2.0], [2.0, 1.0]])})

    def test_exp_cone_closure_at_zero(self):
        expc = parse_expr("expCone a b c", vars=["a", "b", "c"])
        assert evaluate(expc, {"a": -1.0, "b": 0.0, "c": 0.0})
        assert not evaluate(expc, {"a": 1.0, "b": 0.0, "c": 5.0})

    def test_batch_matches_pointwise(self):
        e = ex("exp x - abs (y) + x^2")
        xs = np.linspace(-2, 2, 7)
        ys = np.linspace(3, -3, 7)
        batch = evaluate_batch(e, {"x": xs, "y": ys}, {"x": SCALAR, "y": SCALAR})
        for i in range(7):
            assert batch[i] == evaluate(e, {"x": xs[i], "y": ys[i]})


class TestShapes:
    def test_coords(self):
        assert coords_of("x", SCALAR) == ["x"]
        assert coords_of("v", vector(2)) == [("v", 0), ("v", 1)]
        assert coords_of("S", matrix(2)) == [("S", 0, 0), ("S", 0, 1), ("S", 1, 1)]

    def test_shape_errors(self):
        env = {"S": matrix(2), "v": vector(3)}
        with pytest.raises(ShapeError):
            shape_of(parse_expr("S + v", vars=["S", "v"]), env)
        assert shape_of(parse_expr("trace S", vars=["S"]), env) == SCALAR

    def test_matrix_size_must_be_positive(self):
        with pytest.raises((ValueError, ModelError, ShapeError)):
            matrix(0)


class TestAffineForm:
    def test_expansion(self):
        f = affine_form(ex("2*x - 3 - y"), ["x", "y"])
        assert f.coeffs == {"x": 2.0, "y": -1.0}
        assert f.const == -3.0

    def test_not_affine(self):
        assert affine_form(ex("sqrt x", ["x"]), ["x"]) is None
        assert affine_form(ex("x * y"), ["x", "y"]) is None

    def test_parameter_coefficient(self):
        e = parse_expr("a*x - 3", vars=["x"], params=["a"])
        f = affine_form(e, ["x"])
        assert f.coeffs["x"] == Param("a")
        assert f.const == -3.0

    def test_matrix_entries(self):
        f = affine_form(parse_expr("trace S + 2", vars=["S"]), {"S": matrix(2)})
        assert f.coeffs == {("S", 0, 0): 1.0, ("S", 1, 1): 1.0}
        assert f.const == 2.0


names = st.sampled_from(["x", "y", "z"])
consts = st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 3))


def affine_exprs():
    leaf = st.one_of(names.map(Var), consts.map(Const))

    def extend(inner):
        return st.one_of(
            st.tuples(inner, inner).map(lambda a: Apply("add", a)),
            st.tuples(inner, inner).map(lambda a: Apply("sub", a)),
            inner.map(lambda a: Apply("neg", (a,))),
            st.tuples(consts.map(Const), inner).map(lambda a: Apply("mul", a)),
            st.tuples(inner, st.sampled_from([2.0, -4.0, 0.5])).map(lambda a: Apply("div", (a[0], Const(a[1])))),
        )

    return st.recursive(leaf, extend, max_leaves=12)


@settings(max_examples=150, deadline=None)
@given(affine_exprs(), st.integers(0, 2**32 - 1))
def test_affine_form_soundness(e, seed):
    f = affine_form(e, ["x", "y", "z"])
    assert f is not None
    rng = np.random.default_rng(seed)
    for _ in range(100):
        a = {n: float(v) for n, v in zip("xyz", rng.uniform(-10, 10, 3))}
        direct = evaluate(e, a)
        via = f.evaluate(a)
        assert via == pytest.approx(direct, rel=1e-12, abs=1e-9)


class TestProblem:
    def test_normalize_sense(self):
        p = parse_problem("optimization (x y : R)\n  maximize sqrt (x - y)\n")
        q = normalize_sense(p)
        assert q.sense == "minimize"
        assert q.objective == Apply("neg", (p.objective,))

    def test_normalize_minimize_is_identity(self):
        p = parse_problem("optimization (x : R)\n  minimize x\n")
        assert normalize_sense(p) == p

    def test_no_simplification(self):
        p = parse_problem("optimization (x : R)\n  maximize -x\n")
        assert normalize_sense(p).objective == Apply("neg", (Apply("neg", (Var("x"),)),))

    def test_duplicate_names_rejected(self):
        with pytest.raises(ModelError):
            Problem((VarDecl("x", SCALAR), VarDecl("x", SCALAR)), Var("x"))

    def test_undeclared_identifier_rejected(self):
        with pytest.raises(ModelError):
            Problem((VarDecl("x", SCALAR),), Var("y"))

    def test_bind_params(self):
        p = parse_problem(
            "parameters (a : R)\nassuming\n  ha : 0 < a\noptimization (x : R)\n  minimize a * x\n  subject to\n    c : 0 <= x\n"
        )
        q = bind_params(p, {"a": 2.0})
        assert not q.params
        assert q.objective_value({"x": 3.0}) == 6.0
        with pytest.raises(ModelError):
            bind_params(p, {"a": -1.0})
        with pytest.raises(UnboundParameter):
            from cvxc import canonicalize

            canonicalize(p)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_normalize_sense_preserves_order(x1, y1, x2, y2):
    p = parse_problem("optimization (x y : R)\n  maximize x - y^2\n")
    q = normalize_sense(p)
    a, b = {"x": x1, "y": y1}, {"x": x2, "y": y2}
    fa, fb = p.objective_value(a), p.objective_value(b)
    ga, gb = q.objective_value(a), q.objective_value(b)
    assert (fa > fb) == (ga < gb)

import sys

import numpy as np
import pytest

from corpus import CORPUS
from cvxc import canonicalize, parse_problem
from cvxc.conic import (
    SolverConfig,
    invoke_solver,
    parse_solution,
    read_cbf,
    solve,
    write_cbf,
    write_cbf_document,
)
from cvxc.expr import bind_params
from cvxc.errors import (
    MalformedSolution,
    MissingVariable,
    SolverNonzeroExit,
    SolverNotFound,
    SolverTimeout,
    UnboundParameter,
)

PY = sys.executable
LP = "optimization (x y : R)\n  minimize x + 2*y\n  subject to\n    a : 1 <= x + y\n"
STUB = f"{PY} -m cvxc.adapters.stub --grid 801 --box -2,2 --box -6,0 {{input}} {{output}}"
CLARABEL = f"{PY} -m cvxc.adapters.clarabel {{input}} {{output}}"


def reduced(text):
    return canonicalize(parse_problem(text))[0]


class TestWriter:
    def test_lp_golden(self, fixtures):
        assert write_cbf(reduced(LP)) == (fixtures / "lp.cbf").read_text()

    def test_so1_golden(self, fixtures):
        assert write_cbf(reduced((fixtures / "so1.cvx").read_text())) == (fixtures / "so1.cbf").read_text()

    def test_no_constraints_no_con_block(self):
        text = write_cbf(reduced("optimization (x : R)\n  minimize 3*x + 1\n"))
        assert "CON" not in text.split()
        assert "OBJBCOORD\n1.0" in text

    def test_maximize_is_negated(self):
        doc = write_cbf_document(reduced("optimization (x : R)\n  maximize 2*x\n  subject to\n    a : x <= 1\n"))
        assert doc.sense == "MIN"
        assert doc.obj == {0: -2.0}

    def test_nonaffine_target_rejected(self):
        with pytest.raises(Exception):
            write_cbf_document(parse_problem("optimization (x : R)\n  minimize exp x\n"))

    @pytest.mark.parametrize("case", CORPUS, ids=lambda c: c.name)
    def test_round_trip(self, case):
        text = write_cbf(canonicalize(case.problem())[0])
        assert read_cbf(text).text() == text

    @pytest.mark.parametrize("case", CORPUS, ids=lambda c: c.name)
    def test_rows_match_cone_expressions(self, case):
        """A x + b evaluated at a feasible reduced point lies in the declared cones."""
        rp, red = canonicalize(case.problem())
        from cvxc.sampling import SampleConfig
        from cvxc.verify import sample_feasible

        doc = write_cbf_document(rp)
        c, c0, A, b = doc.dense()
        for a in sample_feasible(case.problem(), SampleConfig(n=20, box=case.box)):
            q = red.forward(a)
            x = np.array([float(q[n]) for n in doc.var_names])
            assert float(c @ x + c0) == pytest.approx(red.sense_sign * case.problem().objective_value(a), abs=1e-9)
            rows = A @ x + b
            r = 0
            for kind, n in doc.cones:
                blk = rows[r : r + n]
                r += n
                if kind == "L=":
                    assert np.allclose(blk, 0, atol=1e-9)
                elif kind == "L+":
                    assert np.all(blk >= -1e-9)
                elif kind == "QR":
                    assert blk[0] >= -1e-9 and blk[1] >= -1e-9
                    assert blk[2:] @ blk[2:] <= 2 * blk[0] * blk[1] + 1e-9
                elif kind == "EXP":
                    cc, bb, aa = blk
                    assert bb * np.exp(aa / bb) <= cc + 1e-9 * max(1, abs(cc))


class TestSolutionParsing:
    names = ["x", "y"]

    def test_ok(self):
        assert parse_solution("STATUS OPTIMAL\nVAR 1 2.5\nVAR 0 -1\n", self.names) == ("OPTIMAL", {"x": -1.0, "y": 2.5})

    def test_status_only(self):
        assert parse_solution("STATUS PRIMAL_INFEASIBLE\n", self.names) == ("PRIMAL_INFEASIBLE", {})

    def test_missing(self):
        with pytest.raises(MissingVariable):
            parse_solution("STATUS OPTIMAL\nVAR 0 1\n", self.names)

    @pytest.mark.parametrize(
        "text",
        [
            "",
            "VAR 0 1\n",
            "STATUS OPTIMAL\nVAR 0 1\nVAR 0 2\nVAR 1 1\n",
            "STATUS OPTIMAL\nVAR 7 1\n",
            "STATUS OPTIMAL\nVAR 0 one\n",
            "STATUS OPTIMAL\nPSDVAR 0 0 0 1\n",
            "STATUS OPTIMAL\nhello\n",
        ],
    )
    def test_malformed(self, text):
        with pytest.raises(MalformedSolution):
            parse_solution(text, self.names)


class TestInvocation:
    def test_not_found(self, tmp_path):
        f = tmp_path / "p.cbf"
        f.write_text(write_cbf(reduced(LP)))
        with pytest.raises(SolverNotFound):
            invoke_solver(f, SolverConfig("/nonexistent/solver {input} {output}"))

    def test_no_command(self, tmp_path, monkeypatch):
        monkeypatch.delenv("CVXC_SOLVER_CMD", raising=False)
        with pytest.raises(SolverNotFound):
            invoke_solver(tmp_path / "p.cbf", SolverConfig())

    def test_timeout(self, tmp_path):
        with pytest.raises(SolverTimeout):
            invoke_solver(tmp_path / "p.cbf", SolverConfig(f"{PY} -c 'import time; time.sleep(5)'", timeout=0.5))

    def test_nonzero_exit(self, tmp_path):
        with pytest.raises(SolverNonzeroExit) as info:
            invoke_solver(tmp_path / "p.cbf", SolverConfig(f"{PY} -c 'import sys; sys.exit(3)'"))
        assert info.value.code == 3

    def test_no_output_file(self, tmp_path):
        with pytest.raises(MalformedSolution):
            invoke_solver(tmp_path / "p.cbf", SolverConfig(f"{PY} -c 'pass'"))

    @pytest.mark.parametrize("case", CORPUS, ids=lambda c: c.name)
    def test_echo_ordering(self, case, tmp_path):
        doc = write_cbf_document(canonicalize(case.problem())[0])
        f = tmp_path / "p.cbf"
        f.write_text(doc.text())
        status, flat = parse_solution(
            invoke_solver(f, SolverConfig(f"{PY} -m cvxc.adapters.echo {{input}} {{output}}")), doc.var_names
        )
        assert status == "ECHO"
        assert [flat[n] for n in doc.var_names] == list(range(len(doc.var_names)))

    def test_env_command(self, tmp_path, monkeypatch, so1):
        monkeypatch.setenv("CVXC_SOLVER_CMD", CLARABEL)
        monkeypatch.setenv("CVXC_TMPDIR", str(tmp_path))
        assert solve(so1).feasible
        assert list(tmp_path.iterdir()) == []


class TestSolve:
    def test_stub_so1(self, so1):
        res = solve(so1, SolverConfig(STUB))
        assert res.status == "PRIMAL_AND_DUAL_FEASIBLE"
        assert res.value == pytest.approx(2.1010, abs=2e-3)
        assert res.original["x"] == pytest.approx(-1.414, abs=1e-2)
        assert res.original["y"] == pytest.approx(-5.828, abs=2e-2)

    def test_clarabel_so1(self, so1):
        res = solve(so1, SolverConfig(CLARABEL))
        assert res.status == "PRIMAL_AND_DUAL_FEASIBLE"
        assert res.value == pytest.approx(np.sqrt(3 + np.sqrt(2)), abs=1e-6)
        assert res.original["x"] == pytest.approx(-np.sqrt(2), abs=1e-5)
        assert res.residuals["original"] <= 1e-6
        assert res.solver_value == pytest.approx(res.value, abs=1e-6)

    def test_infeasible(self, fixtures):
        p = parse_problem((fixtures / "infeasible.cvx").read_text())
        res = solve(p, SolverConfig(CLARABEL))
        assert res.status == "PRIMAL_INFEASIBLE"
        assert not res.feasible and res.original == {}

    def test_unbound_parameter(self):
        p = parse_problem("parameters (a : R)\noptimization (x : R)\n  minimize a*x\n  subject to\n    c : 0 <= x\n")
        with pytest.raises(UnboundParameter) as info:
            solve(p, SolverConfig(CLARABEL))
        assert info.value.stage == "canonicalize"

    def test_stage_on_solver_error(self, so1):
        with pytest.raises(SolverNotFound) as info:
            solve(so1, SolverConfig("/nonexistent {input} {output}"))
        assert info.value.stage == "invoke_solver"

    @pytest.mark.parametrize("name", ["exp_objective", "abs_sum", "squares", "exp_pair", "mix3"])
    def test_clarabel_matches_brute_force(self, name):
        from corpus import BY_NAME
        from cvxc.verify import brute_force_optimum

        case = BY_NAME[name]
        p = case.problem()
        res = solve(p, SolverConfig(CLARABEL))
        assert res.feasible
        brute, _ = brute_force_optimum(p, 201 if len(p.vars) > 2 else 1001, case.grid_box or case.box)
        sign = -1 if p.sense == "maximize" else 1
        # brute force only ever overestimates the min-form value
        assert sign * res.value <= brute + 1e-6

    def test_bound_parameter(self):
        p = parse_problem("parameters (a : R)\noptimization (x : R)\n  minimize a*x\n  subject to\n    c : 1 <= x\n")
        res = solve(bind_params(p, {"a": 2.0}), SolverConfig(CLARABEL))
        assert res.value == pytest.approx(2.0, abs=1e-6)

    def test_covariance(self, fixtures):
        X = np.array([[1, 0.5], [-0.3, 1.2], [0.8, -0.7]])
        Y = X.T @ X / len(X)  # zero-mean gaussian: the MLE is the second-moment matrix
        p = parse_problem((fixtures / "covariance_q.cvx").read_text())
        res = solve(p, SolverConfig(CLARABEL))
        assert res.feasible
        S = res.original["S"]
        assert np.linalg.norm(np.linalg.inv(S) - Y) <= 1e-4

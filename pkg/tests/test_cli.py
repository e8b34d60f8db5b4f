import json
import shutil
import subprocess
import sys

import pytest

from cvxc.cli import main

PY = sys.executable
CLARABEL = f"{PY} -m cvxc.adapters.clarabel {{input}} {{output}}"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestCheck:
    def test_ok(self, capsys, fixtures):
        code, out, err = run(capsys, "check", fixtures / "so1.cvx")
        assert (code, out.strip(), err) == (0, "ok", "")

    def test_explain_shows_discharge(self, capsys, fixtures):
        code, out, _ = run(capsys, "check", fixtures / "so1.cvx", "--explain")
        assert code == 0
        assert "discharged by c3" in out
        assert "[concave]" in out

    def test_undischarged_condition(self, capsys, fixtures):
        code, out, err = run(capsys, "check", fixtures / "log_missing.cvx")
        assert code == 2 and out == ""
        assert "UndischargedCondition" in err

    def test_syntax_error(self, capsys, tmp_path):
        f = tmp_path / "bad.cvx"
        f.write_text("optimization (x : R)\n  minimize x +\n")
        code, out, err = run(capsys, "check", f)
        assert code == 2 and out == "" and err

    def test_empty_file(self, capsys, tmp_path):
        f = tmp_path / "empty.cvx"
        f.write_text("")
        assert run(capsys, "check", f)[0] == 2

    def test_not_dcp(self, capsys, tmp_path):
        f = tmp_path / "nd.cvx"
        f.write_text("optimization (x : R)\n  maximize exp x\n  subject to\n    c : x <= 1\n")
        code, _, err = run(capsys, "check", f)
        assert code == 2 and err

    def test_missing_file(self, capsys):
        assert run(capsys, "check", "/nonexistent.cvx")[0] == 1

    def test_structured(self, capsys, fixtures):
        code, out, _ = run(capsys, "check", fixtures / "so1.cvx", "--format", "structured")
        assert json.loads(out)["status"] == "ok"


class TestUsage:
    def test_no_command(self, capsys):
        code, out, err = run(capsys)
        assert code == 1 and out == "" and "usage" in err

    def test_unknown_option(self, capsys, fixtures):
        assert run(capsys, "check", fixtures / "so1.cvx", "--bogus")[0] == 1

    def test_verify_needs_exactly_one_mode(self, capsys, fixtures):
        assert run(capsys, "verify")[0] == 1
        assert run(capsys, "verify", fixtures / "so1.cvx", "--atoms")[0] == 1

    def test_unknown_atom(self, capsys):
        assert run(capsys, "verify", "--atoms", "nosuchatom")[0] == 1

    def test_bad_param(self, capsys, fixtures):
        assert run(capsys, "check", fixtures / "so1.cvx", "--param", "a")[0] == 1


class TestCanon:
    def test_print_matches_golden(self, capsys, fixtures):
        code, out, _ = run(capsys, "canon", fixtures / "so1.cvx", "--print")
        assert code == 0
        assert out == (fixtures / "so1.reduced.cvx").read_text()

    def test_cbf_matches_golden(self, capsys, fixtures, tmp_path):
        out_file = tmp_path / "so1.cbf"
        code, out, _ = run(capsys, "canon", fixtures / "so1.cvx", "--cbf", out_file)
        assert code == 0 and out == ""
        assert out_file.read_text() == (fixtures / "so1.cbf").read_text()

    def test_explain(self, capsys, fixtures):
        _, out, _ = run(capsys, "canon", fixtures / "so1.cvx", "--explain")
        assert "c4' <- obj.1 sqrt" in out
        assert "eliminated: c3" in out

    def test_structured(self, capsys, fixtures):
        _, out, _ = run(capsys, "canon", fixtures / "so1.cvx", "--format", "structured")
        data = json.loads(out)
        assert data["eliminated"] == ["c3"]
        assert set(data["interp"]) == {"t.0", "t.1"}

    def test_parameter_binding(self, capsys, tmp_path):
        f = tmp_path / "p.cvx"
        f.write_text("parameters (a : R)\noptimization (x : R)\n  minimize a * x\n  subject to\n    c : 1 <= x\n")
        code, out, _ = run(capsys, "canon", f, "--print", "--param", "a=2.5")
        assert code == 0 and "2.5" in out


class TestVerify:
    def test_file_passes(self, capsys, fixtures):
        code, out, _ = run(capsys, "verify", fixtures / "so1.cvx", "--box", "-3,3", "--samples", "300")
        assert code == 0
        assert out.startswith("status pass")

    def test_structured(self, capsys, fixtures):
        code, out, _ = run(
            capsys, "verify", fixtures / "so1.cvx", "--box", "-3,3", "--samples", "100", "--format", "structured"
        )
        assert code == 0 and json.loads(out)["status"] == "pass"

    def test_inconclusive(self, capsys, fixtures):
        code, _, err = run(capsys, "verify", fixtures / "infeasible.cvx", "--samples", "10", "--max-attempts", "1000")
        assert code == 4 and "inconclusive" in err

    def test_atoms(self, capsys):
        code, out, _ = run(capsys, "verify", "--atoms", "sqrt", "exp", "--samples", "200")
        assert code == 0
        assert len(out.strip().splitlines()) >= 2

    def test_user_pass(self, capsys, fixtures):
        code, out, _ = run(
            capsys, "verify", "--user", fixtures / "exp_product_p.cvx", fixtures / "exp_product_q.cvx",
            fixtures / "exp_product.maps", "--samples", "300",
        )
        assert code == 0 and out.startswith("status pass")

    def test_user_fail(self, capsys, fixtures):
        code, out, _ = run(
            capsys, "verify", "--user", fixtures / "exp_weighted_p.cvx", fixtures / "exp_weighted_q.cvx",
            fixtures / "exp_weighted_swapped.maps", "--samples", "300",
        )
        assert code == 3
        assert "witness" in out

    def test_user_map_mismatch(self, capsys, fixtures, tmp_path):
        maps = tmp_path / "bad.maps"
        maps.write_text("phi x := x\nphi y := y\npsi x := x\n")
        code, _, err = run(
            capsys, "verify", "--user", fixtures / "exp_product_p.cvx", fixtures / "exp_product_q.cvx", maps
        )
        assert code == 1 and err.startswith("error:")

    def test_deterministic(self, capsys, fixtures):
        a = run(capsys, "verify", fixtures / "so1.cvx", "--box", "-3,3", "--samples", "200", "--seed", "7")
        b = run(capsys, "verify", fixtures / "so1.cvx", "--box", "-3,3", "--samples", "200", "--seed", "7")
        assert a == b


class TestSolve:
    def test_clarabel(self, capsys, fixtures):
        code, out, err = run(capsys, "solve", fixtures / "so1.cvx", "--solver", CLARABEL)
        assert code == 0, err
        lines = dict(ln.split(" ", 1) for ln in out.strip().splitlines())
        assert lines["status"] == "PRIMAL_AND_DUAL_FEASIBLE"
        assert float(lines["value"]) == pytest.approx(2.1010029, abs=1e-6)

    def test_infeasible_is_not_an_error(self, capsys, fixtures):
        code, out, _ = run(capsys, "solve", fixtures / "infeasible.cvx", "--solver", CLARABEL)
        assert code == 0 and out.strip() == "status PRIMAL_INFEASIBLE"

    def test_missing_solver(self, capsys, fixtures):
        code, out, err = run(capsys, "solve", fixtures / "so1.cvx", "--solver", "/nonexistent {input} {output}")
        assert code == 5 and out == ""
        assert "invoke_solver" in err

    def test_timeout(self, capsys, fixtures):
        code, _, err = run(
            capsys, "solve", fixtures / "so1.cvx", "--solver", f"{PY} -c 'import time; time.sleep(5)'", "--timeout", "0.5"
        )
        assert code == 5 and "SolverTimeout" in err

    def test_structured(self, capsys, fixtures):
        _, out, _ = run(capsys, "solve", fixtures / "so1.cvx", "--solver", CLARABEL, "--format", "structured")
        data = json.loads(out)
        assert data["solution"]["x"] == pytest.approx(-2**0.5, abs=1e-5)

    def test_parse_error_stage(self, capsys, fixtures):
        code, _, err = run(capsys, "solve", fixtures / "log_missing.cvx", "--solver", CLARABEL)
        assert code == 2 and err.startswith("canonicalize:")


@pytest.mark.skipif(shutil.which("cvxc") is None, reason="console script not installed")
def test_console_script(fixtures):
    proc = subprocess.run(["cvxc", "check", str(fixtures / "so1.cvx")], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "ok"

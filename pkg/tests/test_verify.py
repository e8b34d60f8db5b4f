import json

import numpy as np
import pytest

from corpus import BY_NAME, CORPUS
from cvxc import canonicalize, parse_problem
from cvxc.canon import forward_apply_batch
from cvxc.errors import Infeasible, MapMismatch, SamplerExhausted
from cvxc.expr import Problem
from cvxc.sampling import SampleConfig
from cvxc.verify import (
    UserMaps,
    brute_force_optimum,
    check_reduction,
    check_strong_equivalence,
    check_user_reduction,
    compare_optima,
    identity_map,
    parse_maps,
    sample_feasible,
)


def drop(p: Problem, name: str) -> Problem:
    return Problem(p.vars, p.objective, tuple(c for c in p.constraints if c.name != name), p.sense)


class TestSampler:
    def test_so1_points_feasible(self, so1):
        pts = sample_feasible(so1, SampleConfig(n=100, seed=0, box=(-3, 3)))
        assert len(pts) == 100
        for a in pts:
            assert so1.is_feasible(a)
            assert -3 - 1e-9 <= a["x"] <= 3 + 1e-9

    def test_deterministic(self, so1):
        cfg = SampleConfig(n=50, seed=4, box=(-3, 3))
        assert sample_feasible(so1, cfg) == sample_feasible(so1, cfg)

    def test_infeasible_exhausts(self):
        p = parse_problem("optimization (x : R)\n  minimize x\n  subject to\n    a : x <= -1\n    b : 1 <= x\n")
        with pytest.raises(SamplerExhausted) as info:
            sample_feasible(p, SampleConfig(n=10, max_attempts=10_000))
        assert info.value.found == 0 and info.value.partial == []

    def test_partial_list_returned(self):
        p = parse_problem("optimization (x : R)\n  minimize x\n  subject to\n    a : 9.99 <= x\n")
        with pytest.raises(SamplerExhausted) as info:
            sample_feasible(p, SampleConfig(n=1000, max_attempts=20_000))
        assert 0 < info.value.found < 1000
        assert all(a["x"] >= 9.99 for a in info.value.partial)

    def test_unconstrained_keeps_everything(self):
        p = parse_problem("optimization (x : R)\n  minimize x\n")
        pts = sample_feasible(p, SampleConfig(n=25))
        assert len(pts) == 25

    def test_matrix_samples_symmetric(self):
        p = parse_problem("optimization (S : matrix 2)\n  minimize trace S\n  subject to\n    h : posDef S\n")
        for a in sample_feasible(p, SampleConfig(n=20, box=(-2, 2))):
            assert np.array_equal(a["S"], a["S"].T)
            assert np.linalg.eigvalsh(a["S"])[0] > 0


class TestCompilerReductions:
    def test_so1_passes(self, so1):
        rep = check_reduction(so1, SampleConfig(n=1000, box=(-3, 3)))
        assert rep.status == "pass"
        assert rep.forward_samples == rep.backward_samples == 1000
        assert rep.max_forward_gap <= 1e-8
        assert rep.max_backward_violation <= 1e-8
        assert rep.clause("roundtrip").passed

    def test_deleting_c4_fails_backward(self, so1):
        rp, red = canonicalize(so1)
        rep = check_strong_equivalence(
            red.source,
            drop(rp.problem, "c4'"),
            lambda b: forward_apply_batch(red, b),
            lambda b: {"x": b["x"], "y": b["y"]},
            SampleConfig(n=1000, box=(-3, 3)),
        )
        assert rep.status == "fail"
        c = rep.clause("backward-objective")
        assert not c.passed
        w = c.witness
        assert w["Q:t.0"] > np.sqrt(w["Q:x"] - w["Q:y"])
        assert rep.replay("backward-objective") == pytest.approx(c.worst, rel=1e-9)

    def test_identity_passes_trivially(self, so1):
        rep = check_strong_equivalence(so1, so1, identity_map(so1, so1), identity_map(so1, so1), SampleConfig(n=200))
        assert rep.status == "pass"

    def test_inconclusive_is_not_pass(self):
        p = parse_problem("optimization (x : R)\n  minimize exp x\n  subject to\n    a : 9.999 <= x\n")
        rep = check_reduction(p, SampleConfig(n=1000, max_attempts=10_000))
        assert rep.status == "inconclusive"
        assert not rep.passed

    def test_report_serialization(self, so1):
        rep = check_reduction(so1, SampleConfig(n=100, box=(-3, 3)))
        data = json.loads(rep.to_json())
        assert data["status"] == "pass"
        assert {c["clause"] for c in data["clauses"]} >= {
            "forward-feasibility",
            "forward-objective",
            "backward-feasibility",
            "backward-objective",
        }
        assert rep.text().splitlines()[0] == "status pass"

    def test_reports_deterministic(self, so1):
        a = check_reduction(so1, SampleConfig(n=300, seed=2, box=(-3, 3))).to_json()
        b = check_reduction(so1, SampleConfig(n=300, seed=2, box=(-3, 3))).to_json()
        assert a == b

    @pytest.mark.parametrize("case", CORPUS, ids=lambda c: c.name)
    def test_corpus_passes(self, case):
        rep = check_reduction(case.problem(), SampleConfig(n=1000, box=case.box))
        assert rep.status == "pass", rep.text()


class TestUserReductions:
    def test_exp_product(self, fixtures):
        rep = check_user_reduction(
            (fixtures / "exp_product_p.cvx").read_text(),
            (fixtures / "exp_product_q.cvx").read_text(),
            maps=parse_maps((fixtures / "exp_product.maps").read_text()),
            cfg=SampleConfig(n=1000),
        )
        assert rep.status == "pass"

    def test_swapped_map_fails_with_witness(self, fixtures):
        rep = check_user_reduction(
            (fixtures / "exp_weighted_p.cvx").read_text(),
            (fixtures / "exp_weighted_q.cvx").read_text(),
            maps=parse_maps((fixtures / "exp_weighted_swapped.maps").read_text()),
            cfg=SampleConfig(n=1000),
        )
        assert rep.status == "fail"
        for c in rep.failures():
            assert c.witness is not None
            assert rep.replay(c.name) == pytest.approx(c.worst, rel=1e-9)

    def test_covariance_monotone(self, fixtures):
        rep = check_user_reduction(
            (fixtures / "covariance_p.cvx").read_text(),
            (fixtures / "covariance_q.cvx").read_text(),
            maps=parse_maps((fixtures / "covariance.maps").read_text()),
            cfg=SampleConfig(n=500, box=(-3, 3)),
        )
        assert rep.status == "pass"
        assert "surrogate" in rep.mode

    def test_monotone_mode_detects_wrong_map(self, fixtures):
        maps = UserMaps({"S": "R"}, {"R": "S"}, "monotone")
        rep = check_user_reduction(
            (fixtures / "covariance_p.cvx").read_text(),
            (fixtures / "covariance_q.cvx").read_text(),
            maps=maps,
            cfg=SampleConfig(n=500, box=(-3, 3)),
        )
        assert rep.status == "fail"

    def test_missing_psi_variable(self, fixtures):
        with pytest.raises(MapMismatch):
            check_user_reduction(
                (fixtures / "exp_product_p.cvx").read_text(),
                (fixtures / "exp_product_q.cvx").read_text(),
                {"x": "x", "y": "y"},
                {"x": "x"},
            )

    def test_map_may_only_use_source_variables(self, fixtures):
        with pytest.raises(Exception):
            check_user_reduction(
                (fixtures / "covariance_p.cvx").read_text(),
                (fixtures / "covariance_q.cvx").read_text(),
                {"S": "inv S"},
                {"R": "inv S"},
            )

    def test_maps_file_errors(self):
        with pytest.raises(MapMismatch):
            parse_maps("phi x = y")
        with pytest.raises(MapMismatch):
            parse_maps("mode weird")
        with pytest.raises(MapMismatch):
            parse_maps("phi x := x\nphi x := y")

    def test_transitivity(self, fixtures):
        """user step then compiler step; the chain passes iff both do."""
        P = parse_problem((fixtures / "exp_product_p.cvx").read_text())
        Q = parse_problem((fixtures / "exp_product_q.cvx").read_text())
        cfg = SampleConfig(n=500)
        first = check_strong_equivalence(P, Q, identity_map(P, Q), identity_map(Q, P), cfg)
        rq, red = canonicalize(Q)
        second = check_reduction(Q, cfg, reduction=red)
        chain = check_strong_equivalence(
            P,
            rq.problem,
            lambda b: forward_apply_batch(red, b),
            lambda b: {"x": b["x"], "y": b["y"]},
            cfg,
        )
        assert first.passed and second.passed and chain.passed
        broken = drop(rq.problem, rq.constraints[-1].name)
        chain_bad = check_strong_equivalence(
            P, broken, lambda b: forward_apply_batch(red, b), lambda b: {"x": b["x"], "y": b["y"]}, cfg
        )
        single_bad = check_strong_equivalence(
            Q, broken, lambda b: forward_apply_batch(red, b), lambda b: {"x": b["x"], "y": b["y"]}, cfg
        )
        assert chain_bad.status == single_bad.status == "fail"


class TestBruteForce:
    def test_so1(self, so1):
        value, arg = brute_force_optimum(so1, 2001, [(-2, 2), (-6, 0)])
        assert value == pytest.approx(-2.1010, abs=2e-3)
        assert arg["x"] == pytest.approx(-1.414, abs=3e-3)
        assert arg["y"] == pytest.approx(-5.828, abs=3e-3)

    def test_so1_clipped_box(self, so1):
        value, arg = brute_force_optimum(so1, 2001, (-3, 3))
        # grid points are projected onto y = 2x - 3; the corner (-3, -3) lands at (-0.6, -4.2)
        assert value == pytest.approx(-np.sqrt(3.6), abs=2e-3)
        assert arg["x"] == pytest.approx(-0.6, abs=3e-3)
        assert arg["y"] == pytest.approx(-4.2, abs=3e-3)

    def test_active_lower_bound(self):
        p = parse_problem("optimization (x : R)\n  minimize x\n  subject to\n    c : 0 <= x\n")
        assert brute_force_optimum(p, 2001, (-1, 1)) == (0.0, {"x": 0.0})

    def test_exp_with_active_bound(self):
        value, arg = brute_force_optimum(BY_NAME["exp_objective"].problem(), 2001, (-10, 10))
        assert value == pytest.approx(2.718282, abs=1e-6)
        assert arg["x"] == pytest.approx(1.0)

    def test_infeasible(self):
        p = parse_problem("optimization (x : R)\n  minimize x\n  subject to\n    a : x <= -1\n    b : 1 <= x\n")
        with pytest.raises(Infeasible):
            brute_force_optimum(p, 101, (-5, 5))

    def test_grid_limit(self, so1):
        with pytest.raises(Exception):
            brute_force_optimum(so1, 20001, (-3, 3))

    def test_upper_bound_converges(self, so1):
        coarse, _ = brute_force_optimum(so1, 101, [(-2, 2), (-6, 0)])
        fine, _ = brute_force_optimum(so1, 2001, [(-2, 2), (-6, 0)])
        true = -np.sqrt(3 + np.sqrt(2))
        assert true - 1e-9 <= fine <= coarse + 1e-12


def test_optimum_coincidence_so1(so1):
    r = compare_optima(so1, [(-2, 2), (-6, 0)], grid_p=401, budget=2e6)
    assert r.agrees, r

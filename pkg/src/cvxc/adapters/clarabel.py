"""Adapter for the Clarabel interior-point solver.

CBF rows ``A x + b in K`` become Clarabel's ``A' x + s = b'``, ``s in K'``
with ``A' = -A`` and ``b' = b``.  Rotated cones are rewritten as second-order
cones, exponential cone rows are reversed, and PSD blocks are passed as
scaled upper triangles.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import clarabel
import numpy as np
from scipy import sparse

from ..conic import read_cbf
from ._common import write_solution

STATUS = {
    "Solved": "PRIMAL_AND_DUAL_FEASIBLE",
    "AlmostSolved": "NEAR_OPTIMAL",
    "PrimalInfeasible": "PRIMAL_INFEASIBLE",
    "AlmostPrimalInfeasible": "PRIMAL_INFEASIBLE",
    "DualInfeasible": "DUAL_INFEASIBLE",
    "AlmostDualInfeasible": "DUAL_INFEASIBLE",
}


def build(doc):
    """``(q, A, b, cones)`` in Clarabel's convention."""
    c, _, A, b = doc.dense()
    rows_A, rows_b, cones = [], [], []
    r = 0
    s = 1 / math.sqrt(2)
    for kind, n in doc.cones:
        blockA, blockb = A[r : r + n], b[r : r + n]
        r += n
        if kind == "L=":
            cones.append(clarabel.ZeroConeT(n))
        elif kind == "L+":
            cones.append(clarabel.NonnegativeConeT(n))
        elif kind == "Q":
            cones.append(clarabel.SecondOrderConeT(n))
        elif kind == "QR":
            T = np.eye(n)
            T[:2, :2] = [[s, s], [s, -s]]
            blockA, blockb = T @ blockA, T @ blockb
            cones.append(clarabel.SecondOrderConeT(n))
        elif kind == "EXP":
            blockA, blockb = blockA[::-1], blockb[::-1]
            cones.append(clarabel.ExponentialConeT())
        else:
            raise SystemExit(f"unsupported cone {kind}")
        rows_A.append(-blockA)
        rows_b.append(blockb)
    for k, n in enumerate(doc.psd):
        H, D = doc.psd_dense(k)
        ra, rb = [], []
        for j in range(n):
            for i in range(j + 1):
                w = 1.0 if i == j else math.sqrt(2)
                ra.append(-w * H[:, i, j])
                rb.append(w * D[i, j])
        rows_A.append(np.array(ra))
        rows_b.append(np.array(rb))
        cones.append(clarabel.PSDTriangleConeT(n))
    if rows_A:
        A2 = np.vstack(rows_A)
        b2 = np.concatenate(rows_b)
    else:
        A2 = np.zeros((0, doc.nvars))
        b2 = np.zeros(0)
    return c, A2, b2, cones


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m cvxc.adapters.clarabel")
    ap.add_argument("--tol", type=float, default=1e-9)
    ap.add_argument("input")
    ap.add_argument("output")
    args = ap.parse_args(argv)
    doc = read_cbf(Path(args.input).read_text(encoding="utf-8"))
    if doc.sense != "MIN":
        raise SystemExit("only OBJSENSE MIN is supported")
    q, A, b, cones = build(doc)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = args.tol
    n = doc.nvars
    solver = clarabel.DefaultSolver(sparse.csc_matrix((n, n)), q, sparse.csc_matrix(A), b, cones, settings)
    sol = solver.solve()
    status = STATUS.get(str(sol.status), "UNKNOWN")
    values = list(sol.x) if status in ("PRIMAL_AND_DUAL_FEASIBLE", "NEAR_OPTIMAL") else None
    write_solution(args.output, status, values)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Grid-search stand-in for a conic solver.

Searches the reduced problem over a grid of the original variables, filling
in the fresh variables through the forward map stored next to the CBF file.
Accuracy is limited by the grid step.
"""

from __future__ import annotations

import argparse
import sys

from ..errors import Infeasible
from ..expr import coord_name, coords_of, evaluate_batch
from ..parser import parse_expr, parse_problem
from ..verify import brute_force_optimum
from ._common import load_sidecar, write_solution


def _box(text: str):
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m cvxc.adapters.stub")
    ap.add_argument("--grid", type=int, default=401, help="points per original coordinate")
    ap.add_argument("--box", type=_box, action="append", help="lo,hi; once for all coordinates or once per coordinate")
    ap.add_argument("input")
    ap.add_argument("output")
    argv = list(sys.argv[1:] if argv is None else argv)
    # "--box -2,2" would read the negative bound as an option
    for i in range(len(argv) - 1):
        if argv[i] == "--box":
            argv[i], argv[i + 1] = f"--box={argv[i + 1]}", None
    args = ap.parse_args([a for a in argv if a is not None])

    info = load_sidecar(args.input)
    q = parse_problem(info["reduced"])
    originals = info["original_vars"]
    interp = {z: parse_expr(e, vars=originals) for z, e in info["interp"].items()}
    shapes = q.shapes

    def lift(batch):
        out = dict(batch)
        for z, e in interp.items():
            out[z] = evaluate_batch(e, batch, shapes)
        return out

    lift.domain = tuple(originals)
    boxes = args.box or [(-10.0, 10.0)]
    box = boxes[0] if len(boxes) == 1 else boxes
    try:
        _, best = brute_force_optimum(q, args.grid, box, lift=lift)
    except Infeasible:
        write_solution(args.output, "PRIMAL_INFEASIBLE")
        return 0
    flat = {}
    for d in q.vars:
        v = best[d.name]
        for c in coords_of(d.name, d.shape):
            flat[coord_name(c)] = float(v if isinstance(c, str) else v[c[1:]])
    write_solution(args.output, "PRIMAL_AND_DUAL_FEASIBLE", [flat[n] for n in info["order"]])
    return 0


if __name__ == "__main__":
    sys.exit(main())

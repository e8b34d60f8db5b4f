"""``cvxc`` command line: check, canon, verify, solve.

Results go to stdout, diagnostics to stderr.  Exit codes: 0 ok/pass,
1 usage, 2 parse or DCP error, 3 verification failed, 4 inconclusive,
5 solver error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .atoms import builtin_registry, check_atom_obligations
from .canon import canonicalize
from .conic import SolverConfig, solve, write_cbf
from .errors import CvxcError, MapMismatch, SamplerExhausted, SolverError
from .expr import bind_params
from .parser import parse_problem
from .sampling import SampleConfig
from .verify import check_reduction, check_user_reduction, parse_maps

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_SOLVER = range(6)
# atoms whose numerics need a looser default tolerance
ATOM_TOL = {"logdet": 1e-5}


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message)


def _pair(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _param(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    return name.strip(), json.loads(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--tol", type=float, default=None, help="objective / obligation tolerance")
    common.add_argument("--feas-tol", type=float, default=1e-6, help="cone membership tolerance")
    common.add_argument("--format", choices=("text", "structured"), default="text")
    common.add_argument("--param", type=_param, action="append", default=[], metavar="NAME=VALUE",
                        help="bind a parameter (VALUE is JSON)")

    ap = _Parser(prog="cvxc", description="DCP canonicalization with checkable reductions.")
    ap.add_argument("--version", action="version", version=f"cvxc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("check", parents=[common], help="parse and DCP-check a problem")
    p.add_argument("file")
    p.add_argument("--explain", action="store_true", help="print role-annotated atom trees")

    p = sub.add_parser("canon", parents=[common], help="canonicalize to conic form")
    p.add_argument("file")
    p.add_argument("--print", action="store_true", dest="print_", help="print the reduced problem")
    p.add_argument("--cbf", metavar="OUT", help="write the reduced problem as CBF")
    p.add_argument("--explain", action="store_true", help="print trees, provenance and eliminated constraints")

    p = sub.add_parser("verify", parents=[common], help="check a reduction or atom obligations")
    p.add_argument("file", nargs="?")
    p.add_argument("--atoms", nargs="*", metavar="NAME", help="check built-in atom obligations (all if no names)")
    p.add_argument("--user", nargs=3, metavar=("P", "Q", "MAPS"), help="check a user reduction")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--box", type=_pair, default=(-10.0, 10.0), metavar="LO,HI")
    p.add_argument("--max-attempts", type=int, default=100_000)

    p = sub.add_parser("solve", parents=[common], help="solve through a solver adapter")
    p.add_argument("file")
    p.add_argument("--solver", metavar="CMD", help="adapter command template (default $CVXC_SOLVER_CMD)")
    p.add_argument("--timeout", type=float, default=60.0)
    return ap


def _fix_negative_pairs(argv: list) -> list:
    """``--box -3,3`` would otherwise read ``-3,3`` as an option."""
    out = list(argv)
    for i in range(len(out) - 1):
        if out[i] == "--box" and out[i + 1].startswith("-"):
            out[i], out[i + 1] = f"--box={out[i + 1]}", None
    return [a for a in out if a is not None]


def _load(path: str, params) :
    text = Path(path).read_text(encoding="utf-8")
    p = parse_problem(text)
    if params:
        p = bind_params(p, dict(params))
    return p


def _emit(args, text: str, data) -> None:
    if args.format == "structured":
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        print(text.rstrip("\n"))


def cmd_check(args) -> int:
    p = _load(args.file, args.param)
    rp, _ = canonicalize(p)
    lines = ["ok"]
    if args.explain:
        for name, tree in rp.trees.items():
            lines.append(f"{name}:")
            lines += ["  " + ln for ln in tree.render()]
    _emit(args, "\n".join(lines), {"status": "ok", "trees": {k: t.render() for k, t in rp.trees.items()}})
    return EXIT_OK


def cmd_canon(args) -> int:
    p = _load(args.file, args.param)
    rp, red = canonicalize(p)
    if args.cbf:
        Path(args.cbf).write_text(write_cbf(rp), encoding="utf-8")
    text = rp.text()
    if args.explain:
        text += "\n" + rp.explain()
    if args.print_ or args.explain or not args.cbf:
        _emit(
            args,
            text,
            {
                "reduced": rp.text(),
                "provenance": dict(rp.provenance),
                "eliminated": list(rp.eliminated),
                "interp": {k: str(v) for k, v in red.interp.items()},
            },
        )
    return EXIT_OK


def _report_exit(status: str) -> int:
    return {"pass": EXIT_OK, "fail": EXIT_FAIL}.get(status, EXIT_INCONCLUSIVE)


def cmd_verify(args) -> int:
    modes = sum(x is not None for x in (args.file, args.atoms, args.user))
    if modes != 1:
        raise _Usage("verify takes exactly one of FILE, --atoms or --user")
    cfg = SampleConfig(n=args.samples, seed=args.seed, box=args.box, max_attempts=args.max_attempts)
    if args.atoms is not None:
        return _verify_atoms(args, cfg)
    tol = args.tol if args.tol is not None else 1e-8
    if args.user:
        P, Q, maps = (Path(f).read_text(encoding="utf-8") for f in args.user)
        try:
            report = check_user_reduction(P, Q, cfg=cfg, maps=parse_maps(maps), tol=tol, feas_tol=args.feas_tol)
        except MapMismatch as ex:
            print(f"error: {ex}", file=sys.stderr)
            return EXIT_USAGE
    else:
        p = _load(args.file, args.param)
        report = check_reduction(p, cfg, tol, feas_tol=args.feas_tol)
    _emit(args, report.text(), report.to_dict())
    if report.status == "inconclusive":
        print(f"inconclusive: {report.message}", file=sys.stderr)
    return _report_exit(report.status)


def _verify_atoms(args, cfg) -> int:
    reg = builtin_registry()
    names = args.atoms or reg.names()
    unknown = [n for n in names if n not in reg]
    if unknown:
        raise _Usage(f"unknown atom(s): {', '.join(unknown)}")
    texts, data, status = [], [], "pass"
    for name in names:
        tol = args.tol if args.tol is not None else ATOM_TOL.get(name, 1e-7)
        try:
            rep = check_atom_obligations(reg[name], cfg, tol)
        except SamplerExhausted as ex:
            texts.append(f"atom {name}: inconclusive ({ex})")
            data.append({"atom": name, "status": "inconclusive", "message": str(ex)})
            if status == "pass":
                status = "inconclusive"
            continue
        texts.append(rep.summary())
        data.append(rep.to_dict())
        if not rep.passed:
            status = "fail"
    _emit(args, "\n".join(texts), {"status": status, "atoms": data})
    return _report_exit(status)


def cmd_solve(args) -> int:
    p = _load(args.file, args.param)
    cfg = SolverConfig(command=args.solver, timeout=args.timeout)
    res = solve(p, cfg)
    lines = [f"status {res.status}"]
    if res.feasible:
        lines.append(f"value {res.value!r}")
        for k, v in res.original.items():
            lines.append(f"{k} {_show(v)}")
        lines.append(f"residual {res.residuals['original']:.3g}")
    _emit(args, "\n".join(lines), res.to_dict())
    return EXIT_OK


def _show(v) -> str:
    try:
        return repr(float(v))
    except TypeError:
        return json.dumps(v.tolist())


COMMANDS = {"check": cmd_check, "canon": cmd_canon, "verify": cmd_verify, "solve": cmd_solve}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    ap = build_parser()
    try:
        args = ap.parse_args(_fix_negative_pairs(argv))
        return COMMANDS[args.command](args)
    except _Usage as ex:
        print(f"usage error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as ex:
        stage = getattr(ex, "stage", "solve")
        print(f"{stage}: {type(ex).__name__}: {ex}", file=sys.stderr)
        return EXIT_SOLVER
    except CvxcError as ex:
        stage = getattr(ex, "stage", None)
        prefix = f"{stage}: " if stage else ""
        print(f"{prefix}{type(ex).__name__}: {ex}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())

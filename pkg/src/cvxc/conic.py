"""Conic benchmark format output, the solver adapter protocol, and the solve pipeline."""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .canon import ReducedProblem, Reduction, assert_conic, canonicalize
from .errors import (
    CvxcError,
    MalformedSolution,
    MissingVariable,
    NonConicProblem,
    SolverNonzeroExit,
    SolverNotFound,
    SolverTimeout,
    UnboundParameter,
)
from .expr import Apply, Problem, affine_entries, coord_name, coords_of, normalize_sense
from .parser import print_expr

CBF_VERSION = 3
FEASIBLE_STATUSES = ("PRIMAL_AND_DUAL_FEASIBLE", "PRIMAL_FEASIBLE", "OPTIMAL", "NEAR_OPTIMAL")


def fmt(v: float) -> str:
    v = float(v)
    if not np.isfinite(v):
        raise NonConicProblem(f"non-finite coefficient {v}")
    return repr(v + 0.0)


# ---------------------------------------------------------------------------
# document


@dataclass
class CbfDocument:
    """A CBF version-3 problem ``min c'x + c0  s.t.  A x + b in K``.

    Scalar variables are free; symmetric matrix variables are expanded to
    their upper-triangle coordinates.  PSD constraints are PSDCON blocks
    given through HCOORD/DCOORD (lower triangle, ``row >= col``).
    """

    var_names: list
    cones: list = field(default_factory=list)  # (kind, rows) in row order
    psd: list = field(default_factory=list)  # PSDCON dimensions
    obj: dict = field(default_factory=dict)  # var index -> coefficient
    obj_const: float = 0.0
    acoord: dict = field(default_factory=dict)  # (row, var) -> coefficient
    bcoord: dict = field(default_factory=dict)  # row -> constant
    hcoord: dict = field(default_factory=dict)  # (block, var, r, c) -> coefficient
    dcoord: dict = field(default_factory=dict)  # (block, r, c) -> constant
    sense: str = "MIN"
    version: int = CBF_VERSION
    blocks: list = field(default_factory=list)  # constraint name -> cone block indices (provenance)

    @property
    def nvars(self) -> int:
        return len(self.var_names)

    @property
    def nrows(self) -> int:
        return sum(n for _, n in self.cones)

    def text(self) -> str:
        out = ["VER", str(self.version), "", "OBJSENSE", self.sense, ""]
        out += ["VAR", f"{self.nvars} 1", f"F {self.nvars}", ""]
        if self.psd:
            out += ["PSDCON", str(len(self.psd))] + [str(n) for n in self.psd] + [""]
        if self.cones:
            out += ["CON", f"{self.nrows} {len(self.cones)}"]
            out += [f"{k} {n}" for k, n in self.cones] + [""]
        if self.obj:
            out += ["OBJACOORD", str(len(self.obj))]
            out += [f"{j} {fmt(v)}" for j, v in sorted(self.obj.items())] + [""]
        if self.obj_const != 0:
            out += ["OBJBCOORD", fmt(self.obj_const), ""]
        if self.acoord:
            out += ["ACOORD", str(len(self.acoord))]
            out += [f"{i} {j} {fmt(v)}" for (i, j), v in sorted(self.acoord.items())] + [""]
        if self.bcoord:
            out += ["BCOORD", str(len(self.bcoord))]
            out += [f"{i} {fmt(v)}" for i, v in sorted(self.bcoord.items())] + [""]
        if self.hcoord:
            out += ["HCOORD", str(len(self.hcoord))]
            out += [f"{k} {j} {r} {c} {fmt(v)}" for (k, j, r, c), v in sorted(self.hcoord.items())] + [""]
        if self.dcoord:
            out += ["DCOORD", str(len(self.dcoord))]
            out += [f"{k} {r} {c} {fmt(v)}" for (k, r, c), v in sorted(self.dcoord.items())] + [""]
        return "\n".join(out)

    def dense(self):
        """``(c, c0, A, b)`` as numpy arrays (scalar cone rows only)."""
        c = np.zeros(self.nvars)
        for j, v in self.obj.items():
            c[j] = v
        A = np.zeros((self.nrows, self.nvars))
        b = np.zeros(self.nrows)
        for (i, j), v in self.acoord.items():
            A[i, j] = v
        for i, v in self.bcoord.items():
            b[i] = v
        return c, self.obj_const, A, b

    def psd_dense(self, k: int):
        """``(H, D)`` for PSD block ``k``: ``sum_j H[j] x_j + D`` (full symmetric)."""
        n = self.psd[k]
        H = np.zeros((self.nvars, n, n))
        D = np.zeros((n, n))
        for (kk, j, r, c), v in self.hcoord.items():
            if kk == k:
                H[j, r, c] = H[j, c, r] = v
        for (kk, r, c), v in self.dcoord.items():
            if kk == k:
                D[r, c] = D[c, r] = v
        return H, D


def _rows(forms) -> list:
    return [forms[idx] for idx in np.ndindex(*forms.shape)]


def _scalar_forms(e, var_shapes, env):
    ent = affine_entries(e, var_shapes, env)
    if ent is None:
        raise NonConicProblem(f"{print_expr(e)} is not affine")
    for f in _rows(ent):
        if not f.is_numeric:
            raise UnboundParameter(sorted({str(v) for v in f.coeffs.values() if not isinstance(v, float)}))
    return ent


def write_cbf_document(q) -> CbfDocument:
    """Build the CBF document of a conic problem (ReducedProblem or Problem)."""
    p: Problem = q.problem if isinstance(q, ReducedProblem) else q
    if p.params:
        raise UnboundParameter([d.name for d in p.params])
    p = normalize_sense(p)
    assert_conic(p)
    coords = []
    for d in p.vars:
        coords += coords_of(d.name, d.shape)
    index = {c: i for i, c in enumerate(coords)}
    var_shapes = {d.name: d.shape for d in p.vars}
    env = p.shapes
    doc = CbfDocument([coord_name(c) for c in coords])

    (obj,) = _rows(_scalar_forms(p.objective, var_shapes, env))
    doc.obj = {index[k]: float(v) for k, v in obj.coeffs.items()}
    doc.obj_const = float(obj.const)

    def add_block(kind, forms):
        row0 = doc.nrows
        for r, f in enumerate(forms):
            for k, v in f.coeffs.items():
                doc.acoord[(row0 + r, index[k])] = float(v)
            if f.const != 0:
                doc.bcoord[row0 + r] = float(f.const)
        doc.cones.append((kind, len(forms)))
        return ("con", len(doc.cones) - 1)

    for c in p.constraints:
        body: Apply = c.body
        args = [_scalar_forms(a, var_shapes, env) for a in body.args]
        op = body.op
        made = []
        if op == "zeroCone":
            made.append(add_block("L=", _rows(args[0])))
        elif op == "posOrthCone":
            made.append(add_block("L+", _rows(args[0])))
        elif op == "soCone":
            made.append(add_block("Q", _rows(args[0]) + _rows(args[1])))
        elif op == "rotatedSoCone":
            made.append(add_block("QR", _rows(args[0]) + _rows(args[1]) + _rows(args[2])))
        elif op == "expCone":
            n = max(a.size for a in args)
            cols = [np.broadcast_to(a.reshape(-1), (n,)) for a in args]
            for i in range(n):
                # CBF orders the exponential cone as (z, y, x) for y exp(x/y) <= z
                made.append(add_block("EXP", [cols[2][i], cols[1][i], cols[0][i]]))
        elif op == "psdCone":
            (m,) = args
            n = m.shape[0]
            k = len(doc.psd)
            doc.psd.append(n)
            for r in range(n):
                for col in range(r + 1):
                    f = (m[r, col] + m[col, r]).scale(0.5) if r != col else m[r, col]
                    for key, v in f.coeffs.items():
                        doc.hcoord[(k, index[key], r, col)] = float(v)
                    if f.const != 0:
                        doc.dcoord[(k, r, col)] = float(f.const)
            made.append(("psd", k))
        else:
            raise NonConicProblem(f"{c.name}: {op} is not a cone")
        doc.blocks.append((c.name, made))
    return doc


def write_cbf(q) -> str:
    """CBF text of a conic problem; byte-deterministic."""
    return write_cbf_document(q).text()


def read_cbf(text: str) -> CbfDocument:
    """Parse the CBF subset produced by :func:`write_cbf`."""
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    pos = 0
    doc = CbfDocument([])

    def nxt():
        nonlocal pos
        if pos >= len(lines):
            raise MalformedSolution(pos, "unexpected end of CBF input")
        pos += 1
        return lines[pos - 1]

    while pos < len(lines):
        key = nxt()
        try:
            if key == "VER":
                doc.version = int(nxt())
            elif key == "OBJSENSE":
                doc.sense = nxt()
            elif key == "VAR":
                n, k = map(int, nxt().split())
                count = 0
                for _ in range(k):
                    kind, m = nxt().split()
                    if kind != "F":
                        raise MalformedSolution(pos, f"unsupported variable cone {kind}")
                    count += int(m)
                doc.var_names = [f"x{i}" for i in range(n)]
            elif key == "PSDCON":
                doc.psd = [int(nxt()) for _ in range(int(nxt()))]
            elif key == "CON":
                _, k = map(int, nxt().split())
                for _ in range(k):
                    kind, m = nxt().split()
                    doc.cones.append((kind, int(m)))
            elif key == "OBJACOORD":
                for _ in range(int(nxt())):
                    j, v = nxt().split()
                    doc.obj[int(j)] = float(v)
            elif key == "OBJBCOORD":
                doc.obj_const = float(nxt())
            elif key == "ACOORD":
                for _ in range(int(nxt())):
                    i, j, v = nxt().split()
                    doc.acoord[(int(i), int(j))] = float(v)
            elif key == "BCOORD":
                for _ in range(int(nxt())):
                    i, v = nxt().split()
                    doc.bcoord[int(i)] = float(v)
            elif key == "HCOORD":
                for _ in range(int(nxt())):
                    k, j, r, c, v = nxt().split()
                    doc.hcoord[(int(k), int(j), int(r), int(c))] = float(v)
            elif key == "DCOORD":
                for _ in range(int(nxt())):
                    k, r, c, v = nxt().split()
                    doc.dcoord[(int(k), int(r), int(c))] = float(v)
            else:
                raise MalformedSolution(pos, f"unsupported CBF block {key}")
        except ValueError as ex:
            raise MalformedSolution(pos, f"bad number in {key} block: {ex}") from None
    return doc


# ---------------------------------------------------------------------------
# solver protocol


@dataclass
class SolverConfig:
    """Adapter command template with ``{input}`` and ``{output}`` placeholders."""

    command: Optional[str] = None
    timeout: float = 60.0
    tmpdir: Optional[str] = None
    keep_files: bool = False

    def resolved_command(self) -> str:
        cmd = self.command or os.environ.get("CVXC_SOLVER_CMD", "")
        if not cmd.strip():
            raise SolverNotFound("(no solver command: pass --solver or set CVXC_SOLVER_CMD)")
        return cmd

    def resolved_tmpdir(self):
        return self.tmpdir or os.environ.get("CVXC_TMPDIR") or None


def invoke_solver(cbf_path, cfg: SolverConfig) -> str:
    """Run the adapter on ``cbf_path`` and return the solution file text."""
    template = cfg.resolved_command()
    cbf_path = Path(cbf_path)
    out_path = cbf_path.with_suffix(".sol")
    argv = [a.replace("{input}", str(cbf_path)).replace("{output}", str(out_path)) for a in shlex.split(template)]
    if not argv:
        raise SolverNotFound(template)
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=cfg.timeout)
    except FileNotFoundError:
        raise SolverNotFound(" ".join(argv)) from None
    except PermissionError:
        raise SolverNotFound(" ".join(argv)) from None
    except subprocess.TimeoutExpired:
        raise SolverTimeout(" ".join(argv), cfg.timeout) from None
    if proc.returncode != 0:
        raise SolverNonzeroExit(proc.returncode, proc.stderr[-2000:])
    if not out_path.exists():
        raise MalformedSolution(0, f"adapter wrote no solution file at {out_path}")
    return out_path.read_text(encoding="utf-8")


def parse_solution(text: str, var_names: list) -> tuple:
    """Parse adapter output into ``(status, {coordinate name: value})``.

    ``var_names`` is the CBF variable order.  A solution without any VAR
    lines yields an empty assignment; a partial one raises MissingVariable.
    """
    lines = text.splitlines()
    status = None
    values: dict = {}
    for no, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if status is None:
            if parts[0] != "STATUS" or len(parts) != 2:
                raise MalformedSolution(no, "first line must be 'STATUS <token>'")
            status = parts[1]
            continue
        if parts[0] == "VAR" and len(parts) == 3:
            try:
                i, v = int(parts[1]), float(parts[2])
            except ValueError:
                raise MalformedSolution(no, f"bad VAR line {line!r}") from None
            if not 0 <= i < len(var_names):
                raise MalformedSolution(no, f"VAR index {i} out of range")
            if i in values:
                raise MalformedSolution(no, f"duplicate VAR index {i}")
            values[i] = v
        elif parts[0] == "PSDVAR":
            raise MalformedSolution(no, "PSDVAR given but the problem has no PSD variables")
        else:
            raise MalformedSolution(no, f"unrecognised line {line!r}")
    if status is None:
        raise MalformedSolution(1, "empty solution file")
    if not values:
        return status, {}
    for i, name in enumerate(var_names):
        if i not in values:
            raise MissingVariable(name)
    return status, {name: values[i] for i, name in enumerate(var_names)}


def assemble(p: Problem, flat: Mapping) -> dict:
    """Turn coordinate-name values into shaped values for ``p``'s variables."""
    out = {}
    for d in p.vars:
        if d.shape.kind == "scalar":
            out[d.name] = float(flat[d.name])
        elif d.shape.kind == "vector":
            out[d.name] = np.array([flat[coord_name((d.name, i))] for i in range(d.shape.n)])
        else:
            n = d.shape.n
            M = np.zeros((n, n))
            for i in range(n):
                for j in range(i, n):
                    M[i, j] = M[j, i] = flat[coord_name((d.name, i, j))]
            out[d.name] = M
    return out


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class SolveResult:
    status: str
    reduced: dict = field(default_factory=dict)
    original: dict = field(default_factory=dict)
    value: Optional[float] = None
    solver_value: Optional[float] = None
    residuals: dict = field(default_factory=dict)
    cbf: str = ""

    @property
    def feasible(self) -> bool:
        return self.status in FEASIBLE_STATUSES and bool(self.original)

    def to_dict(self) -> dict:
        from .sampling import jsonable

        return jsonable(
            {
                "status": self.status,
                "value": self.value,
                "solver_value": self.solver_value,
                "solution": self.original,
                "reduced": self.reduced,
                "residuals": self.residuals,
            }
        )


def _tag(stage: str, ex: CvxcError) -> CvxcError:
    ex.stage = stage
    return ex


def sidecar(reduction: Reduction, doc: CbfDocument) -> dict:
    """Information an adapter may use besides the CBF (the stub needs the maps)."""
    return {
        "reduced": reduction.target.text(),
        "original_vars": list(reduction.target.original_vars),
        "interp": {k: print_expr(v) for k, v in reduction.interp.items()},
        "order": list(doc.var_names),
    }


def solve(p: Problem, cfg: SolverConfig = None, *, registry=None) -> SolveResult:
    """canonicalize, write CBF, run the adapter, parse, map back, evaluate."""
    cfg = cfg or SolverConfig()
    try:
        if p.params:
            raise UnboundParameter([d.name for d in p.params])
        rp, red = canonicalize(p, registry)
    except CvxcError as ex:
        raise _tag("canonicalize", ex)
    try:
        doc = write_cbf_document(rp)
        cbf = doc.text()
    except CvxcError as ex:
        raise _tag("write_cbf", ex)
    tmp = tempfile.mkdtemp(prefix="cvxc-", dir=cfg.resolved_tmpdir())
    path = Path(tmp) / "problem.cbf"
    path.write_text(cbf, encoding="utf-8")
    Path(tmp, "problem.reduction.json").write_text(json.dumps(sidecar(red, doc), indent=2), encoding="utf-8")
    try:
        try:
            raw = invoke_solver(path, cfg)
        except CvxcError as ex:
            raise _tag("invoke_solver", ex)
        try:
            status, flat = parse_solution(raw, doc.var_names)
        except CvxcError as ex:
            raise _tag("parse_solution", ex)
    finally:
        if not cfg.keep_files:
            for f in Path(tmp).iterdir():
                f.unlink()
            Path(tmp).rmdir()
    result = SolveResult(status, cbf=cbf)
    if status not in FEASIBLE_STATUSES or not flat:
        return result
    Q = rp.problem
    reduced = assemble(Q, flat)
    original = red.backward(reduced)
    c, c0, _, _ = doc.dense()
    x = np.array([flat[n] for n in doc.var_names])
    result.reduced = reduced
    result.original = original
    result.solver_value = red.sense_sign * float(c @ x + c0)
    result.value = p.objective_value(original)
    result.residuals = {"original": p.max_violation(original), "reduced": Q.max_violation(reduced)}
    return result

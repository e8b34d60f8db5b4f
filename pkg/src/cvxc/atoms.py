"""The DCP atom library.

Atoms are declared in a small text format::

    declare_atom log [concave] (x : R)+ : log x :=
      conditions (cond : 0 < x)
      implementationVars (t : R)
      implementationObjective t
      implementationConstraints (c_exp : expCone t 1 x)
      solution (t := log x)

The suffix after each argument is its monotonicity: ``+`` increasing, ``-``
decreasing, ``?`` neither and ``&`` auxiliary (must be a constant).  Shapes may
use a size variable (``matrix n``) resolved when the atom is matched, and
``any`` for arguments of arbitrary shape.

:func:`check_atom_obligations` tests the four properties that make a graph
implementation sound (solution correctness, solution feasibility, optimality,
condition elimination) on random samples.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import DslSyntaxError, DuplicateAtom, MalformedGraphImplementation, SamplerExhausted
from .expr import (
    SCALAR,
    Apply,
    Const,
    Expr,
    Param,
    Shape,
    Var,
    evaluate_batch,
    free_names,
    is_cone,
    is_predicate,
    matrix,
    shape_of,
    substitute,
    vector,
    violation_batch,
)
from .parser import REAL_NAMES, Parser, _describe, print_expr
from .sampling import SampleConfig, batch_len, concat, head, jsonable, point, take, uniform

CURVATURES = ("convex", "concave", "affine")
MONOTONICITIES = ("increasing", "decreasing", "neither", "auxiliary")
_MONO_SUFFIX = {"+": "increasing", "-": "decreasing", "?": "neither", "&": "auxiliary"}
_SUFFIX_OF = {v: k for k, v in _MONO_SUFFIX.items()}


@dataclass(frozen=True)
class ShapeT:
    """Shape template: ``any``, ``scalar``, or ``vector``/``matrix`` of a size
    that is an integer or a size variable name."""

    kind: str
    n: object = None

    def resolve(self, dims: Mapping[str, int]) -> Shape:
        if self.kind in ("any", "scalar"):
            return SCALAR
        n = dims[self.n] if isinstance(self.n, str) else self.n
        return vector(n) if self.kind == "vector" else matrix(n)

    def unify(self, actual: Shape, dims: dict) -> bool:
        if self.kind == "any":
            return True
        if self.kind != actual.kind:
            return False
        if self.kind == "scalar":
            return True
        if isinstance(self.n, str):
            if dims.setdefault(self.n, actual.n) != actual.n:
                return False
            return True
        return self.n == actual.n

    def __str__(self):
        if self.kind == "scalar":
            return "R"
        if self.kind == "any":
            return "any"
        return f"{self.kind} {self.n}"

    @property
    def size_vars(self) -> set:
        return {self.n} if isinstance(self.n, str) else set()


@dataclass(frozen=True)
class AtomArg:
    name: str
    shape: ShapeT
    mono: str


@dataclass(frozen=True)
class AtomDecl:
    name: str
    curvature: str
    args: tuple
    expr: Expr
    vconds: tuple = ()  # (name, predicate) pairs over args
    bconds: tuple = ()
    impl_vars: tuple = ()  # (name, ShapeT) pairs
    impl_objective: Expr = None
    impl_constraints: tuple = ()  # (name, cone predicate) pairs
    solution: tuple = ()  # (impl var name, Expr over args) pairs
    arg_sampler: Optional[Callable] = field(default=None, compare=False)
    pair_sampler: Optional[Callable] = field(default=None, compare=False)

    @property
    def arg_names(self) -> list:
        return [a.name for a in self.args]

    @property
    def is_predicate(self) -> bool:
        return is_predicate(self.expr)

    def mono(self, name: str) -> str:
        for a in self.args:
            if a.name == name:
                return a.mono
        raise KeyError(name)

    def shapes(self, dims: Mapping[str, int] = None) -> dict:
        dims = dict(dims or {})
        for a in self.args:
            for v in a.shape.size_vars:
                dims.setdefault(v, 2)
        out = {a.name: a.shape.resolve(dims) for a in self.args}
        out.update({n: s.resolve(dims) for n, s in self.impl_vars})
        return out

    def describe(self) -> str:
        args = " ".join(f"({a.name} : {a.shape}){_SUFFIX_OF[a.mono]}" for a in self.args)
        lines = [f"declare_atom {self.name} [{self.curvature}] {args} : {print_expr(self.expr)} :="]
        if self.vconds:
            lines.append("  conditions " + " ".join(f"({n} : {print_expr(c)})" for n, c in self.vconds))
        if self.bconds:
            lines.append("  backgroundConditions " + " ".join(f"({n} : {print_expr(c)})" for n, c in self.bconds))
        if self.impl_vars:
            lines.append("  implementationVars " + " ".join(f"({n} : {s})" for n, s in self.impl_vars))
        lines.append(f"  implementationObjective {print_expr(self.impl_objective)}")
        if self.impl_constraints:
            lines.append(
                "  implementationConstraints "
                + " ".join(f"({n} : {print_expr(c)})" for n, c in self.impl_constraints)
            )
        if self.solution:
            lines.append("  solution " + " ".join(f"({n} := {print_expr(e)})" for n, e in self.solution))
        return "\n".join(lines)


def validate_atom(d: AtomDecl) -> None:
    """Raise MalformedGraphImplementation unless ``d`` is a coherent conic graph."""

    def bad(msg):
        raise MalformedGraphImplementation(f"atom {d.name!r}: {msg}")

    if d.curvature not in CURVATURES:
        bad(f"unknown curvature {d.curvature!r}")
    args = d.arg_names
    if len(set(args)) != len(args):
        bad("duplicate argument names")
    for a in d.args:
        if a.mono not in MONOTONICITIES:
            bad(f"unknown monotonicity {a.mono!r}")
    impl = [n for n, _ in d.impl_vars]
    if set(impl) & set(args) or len(set(impl)) != len(impl):
        bad("implementation variables must be fresh and distinct")
    if free_names(d.expr) != set(args):
        bad("the atom expression must mention every argument and nothing else")
    for n, c in d.vconds + d.bconds:
        if not is_predicate(c):
            bad(f"condition {n!r} is not a relation")
        if not free_names(c) <= set(args):
            bad(f"condition {n!r} mentions non-arguments")
    for n, c in d.bconds:
        for name in free_names(c):
            if d.mono(name) != "auxiliary":
                bad(f"background condition {n!r} mentions non-auxiliary argument {name!r}")
    if d.impl_objective is None:
        bad("missing implementation objective")
    if is_predicate(d.impl_objective) != d.is_predicate:
        bad("implementation objective and atom expression disagree on being a predicate")
    if d.is_predicate and d.curvature != "concave":
        bad("predicate atoms describe convex sets and must be declared concave")
    scope = set(args) | set(impl)
    if not free_names(d.impl_objective) <= scope:
        bad("implementation objective mentions unknown names")
    for n, c in d.impl_constraints:
        if not is_cone(c):
            root = c.op if isinstance(c, Apply) else type(c).__name__
            bad(f"implementation constraint {n!r} has non-conic root {root!r}")
        if not free_names(c) <= scope:
            bad(f"implementation constraint {n!r} mentions unknown names")
    sol = [n for n, _ in d.solution]
    if sorted(sol) != sorted(impl) or len(set(sol)) != len(sol):
        bad("exactly one solution expression per implementation variable is required")
    for n, e in d.solution:
        if not free_names(e) <= set(args):
            bad(f"solution for {n!r} may only mention the atom's arguments")


class AtomRegistry:
    """Ordered, immutable collection of atoms; order is matching priority."""

    def __init__(self, atoms=()):
        self._atoms = OrderedDict()
        for d in atoms:
            if d.name in self._atoms:
                raise DuplicateAtom(f"atom {d.name!r} is already registered")
            validate_atom(d)
            self._atoms[d.name] = d

    def register(self, d: AtomDecl) -> "AtomRegistry":
        return AtomRegistry(list(self._atoms.values()) + [d])

    def __iter__(self):
        return iter(self._atoms.values())

    def __len__(self):
        return len(self._atoms)

    def __contains__(self, name):
        return name in self._atoms

    def __getitem__(self, name) -> AtomDecl:
        return self._atoms[name]

    def names(self) -> list:
        return list(self._atoms)


def register_atom(registry: AtomRegistry, d: AtomDecl) -> AtomRegistry:
    return registry.register(d)


# ---------------------------------------------------------------------------
# declaration parser

_SECTIONS = (
    "conditions",
    "backgroundConditions",
    "implementationVars",
    "implementationObjective",
    "implementationConstraints",
    "solution",
)


class _AtomParser(Parser):
    def __init__(self, text):
        super().__init__(text)
        self.stopwords = set(_SECTIONS) | {"declare_atom"}

    def shape_t(self) -> ShapeT:
        t = self.tok
        if t.kind == "ident" and t.text in REAL_NAMES:
            self.advance()
            return ShapeT("scalar")
        if t.kind == "ident" and t.text == "any":
            self.advance()
            return ShapeT("any")
        if t.kind == "ident" and t.text in ("matrix", "vector"):
            self.advance()
            if self.tok.kind == "ident":
                return ShapeT(t.text, self.advance().text)
            return ShapeT(t.text, self.expect_int())
        raise DslSyntaxError(t.span, ["R", "any", "matrix", "vector"], _describe(t))

    def groups(self):
        out = []
        while self.at("("):
            self.advance()
            names = [self.expect_ident()]
            while self.tok.kind == "ident":
                names.append(self.advance())
            self.expect(":")
            shape = self.shape_t()
            self.expect(")")
            out.append((names, shape))
        return out

    def named(self) -> list:
        out = []
        while self.at("("):
            self.advance()
            name = self.expect_ident().text
            self.expect(":")
            # non-predicates are let through so validation can name the problem
            out.append((name, self.relation() if self._relation_ahead() else self.expr()))
            self.expect(")")
        return out

    def atom(self) -> AtomDecl:
        t = self.expect_ident("declare_atom")
        if t.text != "declare_atom":
            raise DslSyntaxError(t.span, ["declare_atom"], t.text)
        name = self.expect_ident("atom name").text
        self.expect("[")
        curv = self.expect_ident("curvature")
        if curv.text not in CURVATURES:
            raise DslSyntaxError(curv.span, CURVATURES, curv.text)
        self.expect("]")
        self.names = {}
        args = []
        while self.at("("):
            (names, shape), = self.groups_one()
            mono = self.expect("+", "-", "?", "&").text
            for n in names:
                args.append(AtomArg(n.text, shape, _MONO_SUFFIX[mono]))
                self.names[n.text] = "var"
        self.expect(":")
        expr = self.relation() if self._relation_ahead() else self.expr()
        self.expect(":=")
        fields = {}
        while self.tok.kind == "ident" and self.tok.text in _SECTIONS:
            sec = self.advance().text
            if sec in fields:
                raise DslSyntaxError(self.tok.span, ["new section"], sec)
            if sec in ("conditions", "backgroundConditions", "implementationConstraints"):
                fields[sec] = tuple(self.named())
            elif sec == "implementationVars":
                impl = []
                for names, shape in self.groups():
                    for n in names:
                        impl.append((n.text, shape))
                        self.names[n.text] = "var"
                fields[sec] = tuple(impl)
            elif sec == "implementationObjective":
                fields[sec] = self.relation() if self._relation_ahead() else self.expr()
            else:
                sol = []
                while self.at("("):
                    self.advance()
                    n = self.expect_ident().text
                    self.expect(":=")
                    sol.append((n, self.expr()))
                    self.expect(")")
                fields[sec] = tuple(sol)
        return AtomDecl(
            name=name,
            curvature=curv.text,
            args=tuple(args),
            expr=expr,
            vconds=fields.get("conditions", ()),
            bconds=fields.get("backgroundConditions", ()),
            impl_vars=fields.get("implementationVars", ()),
            impl_objective=fields.get("implementationObjective"),
            impl_constraints=fields.get("implementationConstraints", ()),
            solution=fields.get("solution", ()),
        )

    def groups_one(self):
        self.expect("(")
        names = [self.expect_ident()]
        while self.tok.kind == "ident":
            names.append(self.advance())
        self.expect(":")
        shape = self.shape_t()
        self.expect(")")
        return [(names, shape)]

    def _relation_ahead(self) -> bool:
        # a relation operator before the next ":=" or section keyword
        depth = 0
        for t in self.toks[self.i :]:
            if t.kind == "eof" or (t.kind == "sym" and t.text == ":=" and depth == 0):
                return False
            if t.kind == "ident" and t.text in self.stopwords:
                return False
            if t.kind == "sym" and t.text in ("(", "![", "!![", "["):
                depth += 1
            elif t.kind == "sym" and t.text in (")", "]"):
                depth -= 1
                if depth < 0:
                    return False
            elif depth == 0 and t.kind == "sym" and t.text in ("=", "<=", "≤", ">=", "≥", "<", ">"):
                return True
        return False


def parse_atoms(text: str) -> list:
    """Parse one or more ``declare_atom`` blocks."""
    p = _AtomParser(text)
    out = []
    while p.tok.kind != "eof":
        out.append(p.atom())
    return out


# ---------------------------------------------------------------------------
# built-in atoms

BUILTIN_ATOMS = """
-- relations and cones (membership in a convex set, declared concave)
declare_atom eq [concave] (a : any)? (b : any)? : a = b :=
  implementationObjective zeroCone (b - a)
declare_atom le [concave] (a : any)- (b : any)+ : a <= b :=
  implementationObjective posOrthCone (b - a)
declare_atom zeroCone [concave] (x : any)? : zeroCone x :=
  implementationObjective zeroCone x
declare_atom posOrthCone [concave] (x : any)+ : posOrthCone x :=
  implementationObjective posOrthCone x
declare_atom soCone [concave] (t : R)+ (x : vector n)? : soCone t x :=
  implementationObjective soCone t x
declare_atom rotatedSoCone [concave] (v : R)+ (w : R)+ (x : vector n)? : rotatedSoCone v w x :=
  implementationObjective rotatedSoCone v w x
declare_atom expCone [concave] (a : any)- (b : any)? (c : any)+ : expCone a b c :=
  implementationObjective expCone a b c
declare_atom psdCone [concave] (M : matrix n)? : psdCone M :=
  implementationObjective psdCone M

-- affine
declare_atom neg [affine] (x : any)- : -x :=
  implementationObjective -x
declare_atom add [affine] (x : any)+ (y : any)+ : x + y :=
  implementationObjective x + y
declare_atom sub [affine] (x : any)+ (y : any)- : x - y :=
  implementationObjective x - y
declare_atom smul [affine] (c : R)& (x : any)+ : c * x :=
  backgroundConditions (hc : 0 <= c)
  implementationObjective c * x
declare_atom smul_neg [affine] (c : R)& (x : any)- : c * x :=
  backgroundConditions (hc : c <= 0)
  implementationObjective c * x
declare_atom rmul [affine] (x : any)+ (c : R)& : x * c :=
  backgroundConditions (hc : 0 <= c)
  implementationObjective x * c
declare_atom rmul_neg [affine] (x : any)- (c : R)& : x * c :=
  backgroundConditions (hc : c <= 0)
  implementationObjective x * c
declare_atom sdiv [affine] (x : any)+ (c : R)& : x / c :=
  backgroundConditions (hc : 0 < c)
  implementationObjective x / c
declare_atom sdiv_neg [affine] (x : any)- (c : R)& : x / c :=
  backgroundConditions (hc : c < 0)
  implementationObjective x / c
declare_atom sum [affine] (x : vector n)+ : sum x :=
  implementationObjective sum x
declare_atom trace [affine] (X : matrix n)+ : trace X :=
  implementationObjective trace X
declare_atom diag [affine] (X : matrix n)+ : diag X :=
  implementationObjective diag X

-- convex
declare_atom square [convex] (x : R)? : x ^ 2 :=
  implementationVars (t : R)
  implementationObjective t
  implementationConstraints (c_sq : rotatedSoCone t 0.5 ![x])
  solution (t := x ^ 2)
declare_atom exp [convex] (x : R)+ : exp x :=
  implementationVars (t : R)
  implementationObjective t
  implementationConstraints (c_exp : expCone x 1 t)
  solution (t := exp x)
declare_atom abs [convex] (x : R)? : abs x :=
  implementationVars (t : R)
  implementationObjective t
  implementationConstraints (c_pos : posOrthCone (t - x)) (c_neg : posOrthCone (t + x))
  solution (t := abs x)

-- concave
declare_atom sqrt [concave] (x : R)+ : sqrt x :=
  conditions (cond : 0 <= x)
  implementationVars (t : R)
  implementationObjective t
  implementationConstraints (c_sqrt : rotatedSoCone 0.5 x ![t])
  solution (t := sqrt x)
declare_atom logdet [concave] (A : matrix n)? : log (det A) :=
  conditions (cond : posDef A)
  implementationVars (t : vector n) (Y : matrix n)
  implementationObjective sum t
  implementationConstraints
    (c_exp : expCone t 1 (diag Y))
    (c_psd : psdCone (blockMat (diagMat Y) (triu Y) (transpose (triu Y)) A))
  solution (t := log (ldlD A)) (Y := ldlZ A)
declare_atom log [concave] (x : R)+ : log x :=
  conditions (cond : 0 < x)
  implementationVars (t : R)
  implementationObjective t
  implementationConstraints (c_exp : expCone t 1 x)
  solution (t := log x)
"""


def _logdet_args(rng, k, shapes):
    # L L^T + eps I is positive definite by construction
    n = shapes["A"].n
    L = rng.uniform(-2.0, 2.0, size=(k, n, n))
    A = L @ np.swapaxes(L, -1, -2) + 1e-3 * np.eye(n)
    return {"A": 0.5 * (A + np.swapaxes(A, -1, -2))}


def _logdet_pairs(rng, k, shapes):
    # Build (A, t, Y) in the graph: Z upper triangular with diag y > 0 gives
    # [[D, Z], [Z^T, Z^T D^-1 Z]] PSD; adding a PSD P to the corner keeps it
    # PSD, and t <= log y keeps the exponential cone.
    n = shapes["A"].n
    y = rng.uniform(0.1, 10.0, size=(k, n))
    Z = np.triu(rng.uniform(-2.0, 2.0, size=(k, n, n)), 1) + y[:, :, None] * np.eye(n)
    Zt = np.swapaxes(Z, -1, -2)
    base = Zt @ (Z / y[:, :, None])
    M = rng.uniform(-1.0, 1.0, size=(k, n, n))
    scale = rng.uniform(0.0, 1.0, size=(k, 1, 1)) * (rng.uniform(size=(k, 1, 1)) > 0.2)
    A = base + scale * (M @ np.swapaxes(M, -1, -2))
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    slack = rng.uniform(0.0, 1.0, size=(k, n)) * (rng.uniform(size=(k, 1)) > 0.2)
    t = np.log(y) - slack
    Y = Z + Zt - y[:, :, None] * np.eye(n)
    return {"A": A, "t": t, "Y": Y}


_CUSTOM_SAMPLERS = {"logdet": (_logdet_args, _logdet_pairs)}

_BUILTIN_CACHE = None


def builtin_registry() -> AtomRegistry:
    global _BUILTIN_CACHE
    if _BUILTIN_CACHE is None:
        decls = []
        for d in parse_atoms(BUILTIN_ATOMS):
            if d.name in _CUSTOM_SAMPLERS:
                a, p = _CUSTOM_SAMPLERS[d.name]
                d = AtomDecl(**{**d.__dict__, "arg_sampler": a, "pair_sampler": p})
            decls.append(d)
        _BUILTIN_CACHE = AtomRegistry(decls)
    return _BUILTIN_CACHE


# ---------------------------------------------------------------------------
# matching


def unify(pattern: Expr, e: Expr, binding: dict) -> bool:
    if isinstance(pattern, Var):
        prev = binding.get(pattern.name)
        if prev is None:
            binding[pattern.name] = e
            return True
        return prev == e
    if isinstance(pattern, Const):
        return isinstance(e, Const) and e.value == pattern.value
    if isinstance(pattern, Param):
        return e == pattern
    if not isinstance(e, Apply) or e.op != pattern.op or len(e.args) != len(pattern.args):
        return False
    return all(unify(p, a, binding) for p, a in zip(pattern.args, e.args))


@dataclass(frozen=True)
class Match:
    atom: AtomDecl
    args: dict  # formal name -> actual Expr
    dims: dict


def match_atom(d: AtomDecl, e: Expr, env: Mapping[str, Shape], cache: dict = None) -> Optional[Match]:
    """Structural match of ``e`` against the atom's expression, with shapes."""
    binding = {}
    if not unify(d.expr, e, binding):
        return None
    dims = {}
    for a in d.args:
        if not a.shape.unify(shape_of(binding[a.name], env, cache), dims):
            return None
    return Match(d, binding, dims)


def instantiate(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    return substitute(e, mapping)


# ---------------------------------------------------------------------------
# obligations

OBLIGATIONS = ("solution-correctness", "solution-feasibility", "optimality", "condition-elimination")


@dataclass
class ObligationResult:
    name: str
    passed: bool
    samples: int
    worst: float
    witness: Optional[dict] = None
    direction: Optional[str] = None  # curvature used for the perturbation

    def to_dict(self) -> dict:
        return jsonable(
            {
                "obligation": self.name,
                "status": "pass" if self.passed else "fail",
                "samples": self.samples,
                "worst_violation": self.worst,
                "direction": self.direction,
                "witness": self.witness,
            }
        )


@dataclass
class ObligationReport:
    atom: AtomDecl
    dims: dict
    tol: float
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def result(self, name: str) -> ObligationResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def replay(self, name: str) -> float:
        """Re-evaluate a failing obligation at its witness; returns the violation."""
        r = self.result(name)
        if r.witness is None:
            raise ValueError(f"{name} has no witness")
        d, shapes = self.atom, _obligation_shapes(self.atom, self.dims)
        batch = {k: np.asarray(v)[None] for k, v in r.witness.items()}
        if name == "solution-correctness":
            return float(_correctness(d, batch, shapes)[0])
        if name == "solution-feasibility":
            return float(_feasibility(d, batch, shapes)[0])
        if name == "optimality":
            return float(_optimality(d, batch, shapes, r.direction, self.tol)[0])
        return float(_cond_elim(d, batch, shapes, self.tol)[0])

    def summary(self) -> str:
        dims = "".join(f" {k}={v}" for k, v in sorted(self.dims.items()))
        lines = [f"atom {self.atom.name}{dims}: {'pass' if self.passed else 'FAIL'}"]
        for r in self.results:
            status = "pass" if r.passed else "FAIL"
            lines.append(f"  {r.name:<22} {status}  samples={r.samples} worst={r.worst:.3g}")
            if not r.passed:
                lines.append(f"    witness: {_fmt_witness(r.witness)}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "atom": self.atom.name,
            "dims": dict(self.dims),
            "tol": self.tol,
            "status": "pass" if self.passed else "fail",
            "obligations": [r.to_dict() for r in self.results],
        }


def _fmt_witness(w) -> str:
    parts = []
    for k, v in (w or {}).items():
        a = np.asarray(v)
        parts.append(f"{k}={float(a):.6g}" if a.ndim == 0 else f"{k}={np.array2string(a, precision=4)}")
    return ", ".join(parts)


def _primed(name: str) -> str:
    return name + "'"


def _obligation_shapes(d: AtomDecl, dims) -> dict:
    shapes = d.shapes(dims)
    for a in d.args:
        shapes[_primed(a.name)] = shapes[a.name]
    return shapes


def _per_sample(x):
    x = np.asarray(x, dtype=float)
    x = np.where(np.isnan(x), np.inf, x)
    return x.reshape(x.shape[0], -1).max(axis=1) if x.ndim > 1 else x


def _rel_gap(x, ref):
    with np.errstate(all="ignore"):
        return _per_sample(np.abs(x - ref) / (1.0 + np.abs(ref)))


def _solution_values(d, batch, shapes) -> dict:
    vals = {a: batch[a] for a in d.arg_names}
    for n, e in d.solution:
        vals[n] = evaluate_batch(e, {a: batch[a] for a in d.arg_names}, shapes)
    return vals


def _correctness(d, batch, shapes):
    vals = _solution_values(d, batch, shapes)
    obj = evaluate_batch(d.impl_objective, vals, shapes)
    ref = evaluate_batch(d.expr, {a: batch[a] for a in d.arg_names}, shapes)
    if d.is_predicate:
        return (obj != ref).astype(float)
    return _rel_gap(obj, ref)


def _scale(vals, k):
    s = np.ones(k)
    for v in vals.values():
        a = np.abs(np.asarray(v, dtype=float)).reshape(k, -1)
        with np.errstate(all="ignore"):
            s = np.maximum(s, 1.0 + np.nan_to_num(a.max(axis=1), nan=0.0, posinf=0.0))
    return s


def _feasibility(d, batch, shapes):
    vals = _solution_values(d, batch, shapes)
    k = batch_len(batch)
    worst = np.zeros(k)
    scale = _scale(vals, k)
    for _, c in d.impl_constraints:
        worst = np.maximum(worst, violation_batch(c, vals, shapes) / scale)
    return worst


def _optimality(d, batch, shapes, direction, tol):
    vals = {n: batch[n] for n in d.arg_names + [n for n, _ in d.impl_vars]}
    obj = evaluate_batch(d.impl_objective, vals, shapes)
    primed = {a: Var(_primed(a)) for a in d.arg_names}
    ex = evaluate_batch(substitute(d.expr, primed), {_primed(a): batch[_primed(a)] for a in d.arg_names}, shapes)
    if d.is_predicate:
        # membership ordering false < true: obj implies the perturbed predicate
        return (obj & ~ex).astype(float)
    with np.errstate(all="ignore"):
        gap = (ex - obj) if direction == "convex" else (obj - ex)
        out = np.maximum(gap, 0.0) / (1.0 + np.abs(ex))
    # points where the perturbed expression is undefined are the business of
    # condition elimination
    out = np.where(np.isnan(ex), 0.0, out)
    return _per_sample(out)


def _cond_elim(d, batch, shapes, tol):
    k = batch_len(batch)
    worst = np.zeros(k)
    primed = {a: Var(_primed(a)) for a in d.arg_names}
    vals = {_primed(a): batch[_primed(a)] for a in d.arg_names}
    for _, c in d.vconds:
        ok = evaluate_batch(substitute(c, primed), vals, shapes, tol=tol)
        worst = np.maximum(worst, (~ok).astype(float))
    return worst


def _draw(rng, names_shapes, k, box):
    return {n: uniform(rng, k, s, *box) for n, s in names_shapes}


def _reject(gen, conds, shapes, want, max_attempts, tol):
    parts, count, attempts = [], 0, 0
    while count < want and attempts < max_attempts:
        k = min(max(2 * want, 512), max_attempts - attempts)
        batch = gen(k)
        attempts += k
        mask = np.ones(k, dtype=bool)
        for c in conds:
            mask &= evaluate_batch(c, batch, shapes, tol=tol)
        parts.append(take(batch, mask))
        count += int(mask.sum())
    got = head(concat(parts), want)
    if count < want:
        n = batch_len(got)
        raise SamplerExhausted(count, want, [point(got, i) for i in range(n)])
    return got


def _perturb(rng, d, batch, shapes, direction):
    out = dict(batch)
    k = batch_len(batch)
    for a in d.args:
        x = np.asarray(batch[a.name], dtype=float)
        sign = 0
        if a.mono in ("increasing", "decreasing"):
            sign = 1 if (a.mono == "increasing") == (direction == "concave") else -1
        if sign:
            delta = uniform(rng, k, shapes[a.name], 0.0, 2.0)
            zero = rng.uniform(size=k) < 0.1  # keep some exact ties
            delta[zero] = 0.0
            x = x + sign * delta
        out[_primed(a.name)] = x
    return out


def _worst(name, viol, batch, tol, direction=None):
    i = int(np.argmax(viol))
    worst = float(viol[i])
    passed = bool(worst <= tol)
    return ObligationResult(name, passed, len(viol), worst, None if passed else point(batch, i), direction)


def check_atom_obligations(
    d: AtomDecl, cfg: SampleConfig = None, tol: float = 1e-7, dims: Mapping[str, int] = None
) -> ObligationReport:
    """Sample-test the four graph-implementation obligations of ``d``.

    Raises SamplerExhausted when not enough argument tuples satisfy the
    conditions; mathematical failures are reported, never raised.
    """
    cfg = cfg or SampleConfig()
    shapes = _obligation_shapes(d, dims)
    dims = {v: shapes[a.name].n for a in d.args for v in a.shape.size_vars}
    box = cfg.box_for("*") if isinstance(cfg.box, Mapping) else tuple(cfg.box)
    arg_shapes = [(a.name, shapes[a.name]) for a in d.args]
    impl_shapes = [(n, shapes[n]) for n, _ in d.impl_vars]
    results = []

    # (1) and (2): sampled arguments satisfying the conditions
    rng = cfg.rng(0)
    conds = [c for _, c in d.vconds + d.bconds]
    if d.arg_sampler is not None:
        gen = lambda k: d.arg_sampler(rng, k, shapes)
        args = _reject(gen, conds, shapes, cfg.n, cfg.max_attempts, 0.0)
    else:
        args = _reject(lambda k: _draw(rng, arg_shapes, k, box), conds, shapes, cfg.n, cfg.max_attempts, 0.0)
    sols = _solution_values(d, args, shapes)
    results.append(_worst("solution-correctness", _correctness(d, args, shapes), sols, tol))
    results.append(_worst("solution-feasibility", _feasibility(d, args, shapes), sols, tol))

    # (3) and (4): points of the graph, perturbed along the monotonicity order
    rng = cfg.rng(1)
    premises = [c for _, c in d.impl_constraints + d.bconds]
    if d.pair_sampler is not None:
        pairs = _reject(lambda k: d.pair_sampler(rng, k, shapes), premises, shapes, cfg.n, cfg.max_attempts, 1e-9)
    else:
        pairs = _reject(
            lambda k: _draw(rng, arg_shapes + impl_shapes, k, box), premises, shapes, cfg.n, cfg.max_attempts, 0.0
        )
    directions = ["convex", "concave"] if d.curvature == "affine" else [d.curvature]
    opt, elim = None, None
    for direction in directions:
        batch = _perturb(rng, d, pairs, shapes, direction)
        r = _worst("optimality", _optimality(d, batch, shapes, direction, tol), batch, tol, direction)
        if opt is None or (opt.passed and not r.passed) or (opt.passed == r.passed and r.worst > opt.worst):
            opt = r
        r = _worst("condition-elimination", _cond_elim(d, batch, shapes, tol), batch, tol, direction)
        if elim is None or (elim.passed and not r.passed):
            elim = r
    results += [opt, elim]
    return ObligationReport(d, dims, tol, results)

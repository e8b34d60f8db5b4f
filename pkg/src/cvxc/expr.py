"""Expressions, problems, numeric evaluation and affine analysis.

Expressions are immutable trees of :class:`Const`, :class:`Var`, :class:`Param`
and :class:`Apply` nodes.  ``Apply`` names a *primitive* function (``add``,
``sqrt``, ``det``, ``expCone`` ...) from :data:`PRIMITIVES`; atoms of the DCP
library are patterns built out of these primitives.

Evaluation is vectorised: internally every value carries a leading batch axis,
so the same code path serves single-point evaluation, rejection sampling and
grid search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import numpy as np

from .errors import DomainError, ModelError, ShapeError, UnboundParameter, UnknownName

#: Default feasibility tolerance for cone membership and relations.
FEAS_TOL = 1e-6


# ---------------------------------------------------------------------------
# shapes


@dataclass(frozen=True)
class Shape:
    kind: str  # "scalar" | "vector" | "matrix"
    n: int = 0

    def __post_init__(self):
        if self.kind not in ("scalar", "vector", "matrix"):
            raise ShapeError(f"bad shape kind {self.kind!r}")
        if self.kind != "scalar" and self.n < 1:
            raise ShapeError(f"{self.kind} dimension must be >= 1, got {self.n}")

    @property
    def dims(self) -> tuple:
        if self.kind == "scalar":
            return ()
        if self.kind == "vector":
            return (self.n,)
        return (self.n, self.n)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def __str__(self):
        if self.kind == "scalar":
            return "R"
        return f"{self.kind} {self.n}"


SCALAR = Shape("scalar")


def vector(n: int) -> Shape:
    return Shape("vector", n)


def matrix(n: int) -> Shape:
    return Shape("matrix", n)


def coords_of(name: str, shape: Shape) -> list:
    """Scalar coordinates of a declared variable.

    Scalars are addressed by their name, vector entries by ``(name, i)`` and
    symmetric-matrix entries by ``(name, i, j)`` with ``i <= j`` (upper
    triangle, row major).
    """
    if shape.kind == "scalar":
        return [name]
    if shape.kind == "vector":
        return [(name, i) for i in range(shape.n)]
    return [(name, i, j) for i in range(shape.n) for j in range(i, shape.n)]


def coord_key(c):
    if isinstance(c, str):
        return (c, ())
    return (c[0], tuple(c[1:]))


def coord_name(c) -> str:
    if isinstance(c, str):
        return c
    return f"{c[0]}[{','.join(str(i) for i in c[1:])}]"


# ---------------------------------------------------------------------------
# expression nodes


class Expr:
    __slots__ = ()

    def __add__(self, other):
        return Apply("add", (self, as_expr(other)))

    def __radd__(self, other):
        return Apply("add", (as_expr(other), self))

    def __sub__(self, other):
        return Apply("sub", (self, as_expr(other)))

    def __rsub__(self, other):
        return Apply("sub", (as_expr(other), self))

    def __mul__(self, other):
        return Apply("mul", (self, as_expr(other)))

    def __rmul__(self, other):
        return Apply("mul", (as_expr(other), self))

    def __truediv__(self, other):
        return Apply("div", (self, as_expr(other)))

    def __pow__(self, other):
        return Apply("pow", (self, as_expr(other)))

    def __neg__(self):
        return Apply("neg", (self,))

    def __str__(self):
        from .parser import print_expr

        return print_expr(self)


def _freeze(value):
    if isinstance(value, (int, float, np.floating, np.integer)):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError("constants must be finite")
        return 0.0 if v == 0 else v
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("constants must be finite")
    arr = arr + 0.0  # no negative zeros
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim == 1:
        return tuple(float(v) for v in arr)
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        return tuple(tuple(float(v) for v in row) for row in arr)
    raise ValueError(f"unsupported constant shape {arr.shape}")


@dataclass(frozen=True)
class Const(Expr):
    value: Union[float, tuple]

    def __post_init__(self):
        object.__setattr__(self, "value", _freeze(self.value))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.value, dtype=float)

    @property
    def shape(self) -> Shape:
        if isinstance(self.value, float):
            return SCALAR
        if isinstance(self.value[0], tuple):
            return matrix(len(self.value))
        return vector(len(self.value))

    def __repr__(self):
        return f"Const({self.value!r})"


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def __repr__(self):
        return f"Var({self.name!r})"


@dataclass(frozen=True)
class Param(Expr):
    name: str

    def __repr__(self):
        return f"Param({self.name!r})"


@dataclass(frozen=True)
class Apply(Expr):
    op: str
    args: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        prim = PRIMITIVES.get(self.op)
        if prim is None:
            raise UnknownName(self.op)
        if not prim.accepts(len(self.args)):
            raise ShapeError(f"{self.op} does not accept {len(self.args)} argument(s)")

    def __repr__(self):
        return f"Apply({self.op!r}, {list(self.args)!r})"


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Const(x)


def call(op: str, *args) -> Apply:
    return Apply(op, tuple(as_expr(a) for a in args))


def free_names(e: Expr) -> set:
    out = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, (Var, Param)):
            out.add(n.name)
        elif isinstance(n, Apply):
            stack.extend(n.args)
    return out


def free_vars(e: Expr) -> set:
    out = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            out.add(n.name)
        elif isinstance(n, Apply):
            stack.extend(n.args)
    return out


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace Var/Param leaves by name; the rest of the tree is rebuilt lazily."""
    if isinstance(e, (Var, Param)):
        return mapping.get(e.name, e)
    if isinstance(e, Apply):
        new = tuple(substitute(a, mapping) for a in e.args)
        if all(a is b for a, b in zip(new, e.args)):
            return e
        return Apply(e.op, new)
    return e


def subexpr(e: Expr, path: str) -> Expr:
    for part in filter(None, path.split(".")):
        e = e.args[int(part) - 1]
    return e


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Prim:
    name: str
    arity: object  # int, tuple of ints, or None for variadic (>= 1)
    shape: Callable
    fn: Callable = None
    predicate: bool = False
    strict: bool = False  # strict predicates hold iff violation < 0
    cone: bool = False

    def accepts(self, k: int) -> bool:
        if self.arity is None:
            return k >= 1
        if isinstance(self.arity, tuple):
            return k in self.arity
        return k == self.arity


PRIMITIVES: dict = {}

#: Cone predicates allowed at the root of reduced-problem constraints.
CONE_OPS = ("zeroCone", "posOrthCone", "soCone", "rotatedSoCone", "expCone", "psdCone")
RELATION_OPS = ("eq", "le", "lt")


def _prim(name, arity, shape, fn=None, **kw):
    PRIMITIVES[name] = Prim(name, arity, shape, fn, **kw)


def _same_or_scalar(op):
    def rule(s):
        a, b = s
        if a == b or b == SCALAR:
            return a
        if a == SCALAR:
            return b
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")

    return rule


def _need(kind, op):
    def rule(s):
        for x in s:
            if x.kind != kind:
                raise ShapeError(f"{op} expects {kind} arguments, got {x}")
        return SCALAR

    return rule


def _elementwise(op):
    def rule(s):
        (a,) = s
        if a.kind == "matrix":
            raise ShapeError(f"{op} is not defined on matrices")
        return a

    return rule


def _mul_shape(s):
    a, b = s
    if a == SCALAR:
        return b
    if b == SCALAR:
        return a
    if a.kind == "matrix" and b.kind == "matrix" and a.n == b.n:
        return a
    if a.kind == "matrix" and b.kind == "vector" and a.n == b.n:
        return b
    raise ShapeError(f"mul: incompatible shapes {a} and {b}")


def _div_shape(s):
    a, b = s
    if b != SCALAR:
        raise ShapeError("div: divisor must be scalar")
    return a


def _scalar2(op):
    def rule(s):
        if any(x != SCALAR for x in s):
            raise ShapeError(f"{op} expects scalar arguments")
        return SCALAR

    return rule


def _mat_to(result):
    def rule(s):
        (a,) = s
        if a.kind != "matrix":
            raise ShapeError(f"expected matrix argument, got {a}")
        if result == "same":
            return a
        if result == "vector":
            return vector(a.n)
        return SCALAR

    return rule


def _sum_shape(s):
    (a,) = s
    return SCALAR


def _block_shape(s):
    if any(x.kind != "matrix" or x.n != s[0].n for x in s):
        raise ShapeError("blockMat expects four matrices of equal size")
    return matrix(2 * s[0].n)


def _entry_shape(s):
    if len(s) == 2 and s[0].kind == "vector" and s[1] == SCALAR:
        return SCALAR
    if len(s) == 3 and s[0].kind == "matrix" and s[1] == SCALAR and s[2] == SCALAR:
        return SCALAR
    raise ShapeError("entry expects (vector, i) or (matrix, i, j)")


def _vec_shape(s):
    if any(x != SCALAR for x in s):
        raise ShapeError("vector literal entries must be scalars")
    return vector(len(s))


def _gauss_shape(s):
    r, y = s
    if r.kind != "matrix" or y.kind != "vector" or r.n != y.n:
        raise ShapeError("gaussianPdf expects (matrix n, vector n)")
    return SCALAR


def _pred_any(s):
    return SCALAR


def _pred_same(op):
    def rule(s):
        _same_or_scalar(op)(s)
        return SCALAR

    return rule


def _soc_shape(s):
    t, x = s
    if t != SCALAR or x.kind != "vector":
        raise ShapeError("soCone expects (scalar, vector)")
    return SCALAR


def _rsoc_shape(s):
    v, w, x = s
    if v != SCALAR or w != SCALAR or x.kind != "vector":
        raise ShapeError("rotatedSoCone expects (scalar, scalar, vector)")
    return SCALAR


def _exp_shape(s):
    dims = {x for x in s if x != SCALAR}
    if len(dims) > 1 or any(x.kind == "matrix" for x in dims):
        raise ShapeError("expCone arguments must be scalars or equal-length vectors")
    return SCALAR


def _psd_shape(s):
    (m,) = s
    if m.kind != "matrix":
        raise ShapeError("expects a matrix argument")
    return SCALAR


# numeric kernels.  ``a`` are batched arrays, ``s`` their static shapes and
# ``ctx`` the evaluation context (domain-error policy).


def _lift(x, shape: Shape, target: Shape):
    if shape == SCALAR and target.ndim:
        return x.reshape(x.shape + (1,) * target.ndim)
    return x


def _k_add(a, s, r, ctx):
    return _lift(a[0], s[0], r) + _lift(a[1], s[1], r)


def _k_sub(a, s, r, ctx):
    return _lift(a[0], s[0], r) - _lift(a[1], s[1], r)


def _k_mul(a, s, r, ctx):
    x, y = a
    sx, sy = s
    if sx.kind == "matrix" and sy.kind == "matrix":
        return x @ y
    if sx.kind == "matrix" and sy.kind == "vector":
        return (x @ y[..., None])[..., 0]
    return _lift(x, sx, r) * _lift(y, sy, r)


def _k_div(a, s, r, ctx):
    x, y = a
    ctx.check(y == 0, "division by zero")
    return x / _lift(y, SCALAR, r)


def _k_pow(a, s, r, ctx):
    x, p = a
    frac = p != np.round(p)
    ctx.check((x < 0) & frac, "negative base with fractional exponent")
    ctx.check((x == 0) & (p < 0), "zero to a negative power")
    return np.power(x, p)


def _k_sqrt(a, s, r, ctx):
    ctx.check(a[0] < 0, "sqrt of a negative value")
    return np.sqrt(a[0])


def _k_log(a, s, r, ctx):
    ctx.check(a[0] <= 0, "log of a non-positive value")
    return np.log(a[0])


def _k_exp(a, s, r, ctx):
    return np.exp(a[0])


def _k_sum(a, s, r, ctx):
    x = a[0]
    if s[0].ndim == 0:
        return x
    return x.reshape(x.shape[0], -1).sum(axis=1)


def _k_det(a, s, r, ctx):
    return np.linalg.det(a[0])


def _k_trace(a, s, r, ctx):
    return np.trace(a[0], axis1=-2, axis2=-1)


def _k_diag(a, s, r, ctx):
    return np.diagonal(a[0], axis1=-2, axis2=-1).copy()


def _k_diagmat(a, s, r, ctx):
    return a[0] * np.eye(s[0].n)


def _k_triu(a, s, r, ctx):
    return np.triu(a[0])


def _k_transpose(a, s, r, ctx):
    return np.swapaxes(a[0], -1, -2)


def _k_inv(a, s, r, ctx):
    m = a[0]
    det = np.linalg.det(m)
    bad = ~(np.abs(det) > 0)
    ctx.check(bad, "inverse of a singular matrix")
    safe = np.where(bad[:, None, None], np.eye(s[0].n), m)
    out = np.linalg.inv(safe)
    return np.where(bad[:, None, None], np.nan, out)


def _chol(m, ctx, what):
    n = m.shape[-1]
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    eig = np.linalg.eigvalsh(sym)
    bad = ~(eig[:, 0] > 0)
    ctx.check(bad, f"{what} of a matrix that is not positive definite")
    safe = np.where(bad[:, None, None], np.eye(n), sym)
    c = np.linalg.cholesky(safe)
    return c, bad


def _k_ldld(a, s, r, ctx):
    c, bad = _chol(a[0], ctx, "ldlD")
    d = np.diagonal(c, axis1=-2, axis2=-1) ** 2
    return np.where(bad[:, None], np.nan, d)


def _k_ldlz(a, s, r, ctx):
    # A = C C^T with C lower triangular; Z = diag(C) C^T is upper triangular
    # with Z^T diag(Z)^-1 Z = A.  Returned symmetrically filled.
    c, bad = _chol(a[0], ctx, "ldlZ")
    cd = np.diagonal(c, axis1=-2, axis2=-1)
    z = cd[..., :, None] * np.swapaxes(c, -1, -2)
    y = z + np.swapaxes(z, -1, -2) - z * np.eye(s[0].n)
    return np.where(bad[:, None, None], np.nan, y)


def _k_block(a, s, r, ctx):
    tl, tr, bl, br = np.broadcast_arrays(*a)
    top = np.concatenate([tl, tr], axis=-1)
    bot = np.concatenate([bl, br], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def _index(x, name, ctx):
    v = x[0] if x.size else 0
    if not np.all(x == v) or v != int(v):
        raise ShapeError(f"{name}: index must be an integer constant")
    return int(v)


def _k_entry(a, s, r, ctx):
    n = s[0].n
    idx = [_index(x, "entry", ctx) for x in a[1:]]
    if any(not 0 <= i < n for i in idx):
        raise ShapeError(f"entry: index out of range for size {n}")
    if len(idx) == 1:
        return a[0][:, idx[0]]
    return a[0][:, idx[0], idx[1]]


def _k_vec(a, s, r, ctx):
    return np.stack(np.broadcast_arrays(*a), axis=-1)


def _k_gauss(a, s, r, ctx):
    rm, y = np.broadcast_arrays(a[0], a[1][:, None, :])
    y = y[:, 0, :]
    n = s[0].n
    det = np.linalg.det(rm)
    bad = ~(det > 0)
    ctx.check(bad, "gaussianPdf with a covariance that is not positive definite")
    safe = np.where(bad[:, None, None], np.eye(n), rm)
    q = np.einsum("bi,bi->b", y, np.linalg.solve(safe, y[..., None])[..., 0])
    out = (2 * np.pi) ** (-n / 2) * np.abs(det) ** -0.5 * np.exp(-q / 2)
    return np.where(bad, np.nan, out)


def _flat(x):
    return x.reshape(x.shape[0], -1)


def _pair(a, s):
    r = s[0] if s[0] != SCALAR else s[1]
    return _lift(a[0], s[0], r), _lift(a[1], s[1], r)


def _v_le(a, s, r, ctx):
    x, y = np.broadcast_arrays(*_pair(a, s))
    return _flat(x - y).max(axis=1)


def _v_eq(a, s, r, ctx):
    x, y = np.broadcast_arrays(*_pair(a, s))
    return _flat(np.abs(x - y)).max(axis=1)


def _v_zero(a, s, r, ctx):
    return _flat(np.abs(a[0])).max(axis=1)


def _v_pos(a, s, r, ctx):
    return _flat(-a[0]).max(axis=1)


def _v_soc(a, s, r, ctx):
    t, x = a
    return np.linalg.norm(x, axis=-1) - t


def _v_rsoc(a, s, r, ctx):
    v, w, x = a
    q = np.sum(x * x, axis=-1)
    return np.maximum(np.maximum(q - 2 * v * w, -v), -w)


def _v_exp(a, s, r, ctx):
    x, y, z = a
    shp = max(s, key=lambda q: q.ndim)
    x, y, z = np.broadcast_arrays(*(_lift(q, sq, shp) for q, sq in zip(a, s)))
    with np.errstate(all="ignore"):
        ypos = np.where(y > 0, y, 1.0)
        main = ypos * np.exp(x / ypos) - z
        edge = np.maximum(x, -z)  # closure of the cone at y == 0
        v = np.where(y > 0, main, np.where(y == 0, edge, np.maximum(-y, edge)))
    return _flat(v).max(axis=1)


def _v_psd(a, s, r, ctx):
    m = a[0]
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    bad = ~np.all(np.isfinite(_flat(m)), axis=1)
    sym = np.where(bad[:, None, None], 0.0, sym)
    out = -np.linalg.eigvalsh(sym)[:, 0]
    return np.where(bad, np.nan, out)


_prim("add", 2, _same_or_scalar("add"), _k_add)
_prim("sub", 2, _same_or_scalar("sub"), _k_sub)
_prim("neg", 1, lambda s: s[0], lambda a, s, r, c: -a[0])
_prim("mul", 2, _mul_shape, _k_mul)
_prim("div", 2, _div_shape, _k_div)
_prim("pow", 2, _scalar2("pow"), _k_pow)
_prim("sqrt", 1, _elementwise("sqrt"), _k_sqrt)
_prim("exp", 1, _elementwise("exp"), _k_exp)
_prim("log", 1, _elementwise("log"), _k_log)
_prim("abs", 1, _elementwise("abs"), lambda a, s, r, c: np.abs(a[0]))
_prim("sum", 1, _sum_shape, _k_sum)
_prim("det", 1, _mat_to("scalar"), _k_det)
_prim("trace", 1, _mat_to("scalar"), _k_trace)
_prim("diag", 1, _mat_to("vector"), _k_diag)
_prim("diagMat", 1, _mat_to("same"), _k_diagmat)
_prim("triu", 1, _mat_to("same"), _k_triu)
_prim("transpose", 1, _mat_to("same"), _k_transpose)
_prim("inv", 1, _mat_to("same"), _k_inv)
_prim("ldlD", 1, _mat_to("vector"), _k_ldld)
_prim("ldlZ", 1, _mat_to("same"), _k_ldlz)
_prim("blockMat", 4, _block_shape, _k_block)
_prim("entry", (2, 3), _entry_shape, _k_entry)
_prim("vec", None, _vec_shape, _k_vec)
_prim("gaussianPdf", 2, _gauss_shape, _k_gauss)

_prim("eq", 2, _pred_same("eq"), _v_eq, predicate=True)
_prim("le", 2, _pred_same("le"), _v_le, predicate=True)
_prim("lt", 2, _pred_same("lt"), _v_le, predicate=True, strict=True)
_prim("zeroCone", 1, _pred_any, _v_zero, predicate=True, cone=True)
_prim("posOrthCone", 1, _pred_any, _v_pos, predicate=True, cone=True)
_prim("soCone", 2, _soc_shape, _v_soc, predicate=True, cone=True)
_prim("rotatedSoCone", 3, _rsoc_shape, _v_rsoc, predicate=True, cone=True)
_prim("expCone", 3, _exp_shape, _v_exp, predicate=True, cone=True)
_prim("psdCone", 1, _psd_shape, _v_psd, predicate=True, cone=True)
_prim("posDef", 1, _psd_shape, _v_psd, predicate=True, strict=True)


def is_predicate(e: Expr) -> bool:
    return isinstance(e, Apply) and PRIMITIVES[e.op].predicate


def is_cone(e: Expr) -> bool:
    return isinstance(e, Apply) and PRIMITIVES[e.op].cone


# ---------------------------------------------------------------------------
# shape inference


def shape_of(e: Expr, env: Mapping[str, Shape], _cache: dict = None) -> Shape:
    """Static shape of ``e``; predicates have scalar (boolean) shape."""
    if _cache is not None and e in _cache:
        return _cache[e]
    if isinstance(e, Const):
        out = e.shape
    elif isinstance(e, (Var, Param)):
        if e.name not in env:
            raise UnknownName(e.name)
        out = env[e.name]
    else:
        arg_shapes = [shape_of(a, env, _cache) for a in e.args]
        out = PRIMITIVES[e.op].shape(arg_shapes)
    if _cache is not None:
        _cache[e] = out
    return out


# ---------------------------------------------------------------------------
# evaluation


class _Ctx:
    def __init__(self, strict: bool):
        self.strict = strict
        self.path = ""
        self.node = None
        self.bad = None

    def check(self, mask, message):
        mask = np.asarray(mask)
        if not mask.any():
            return
        if self.strict:
            raise DomainError(self.path, message, self.node)
        m = mask.reshape(mask.shape[0], -1).any(axis=1) if mask.ndim > 1 else mask
        self.bad = m if self.bad is None else (self.bad | m)


def _infer_shape(value) -> Shape:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return SCALAR
    if arr.ndim == 1:
        return vector(arr.shape[0])
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        return matrix(arr.shape[0])
    raise ShapeError(f"cannot infer shape of value with array shape {arr.shape}")


class _Evaluator:
    def __init__(self, env_values, shapes, tol, strict):
        self.values = env_values
        self.shapes = shapes
        self.tol = tol
        self.strict = strict
        self.shape_cache = {}

    def shape(self, e):
        return shape_of(e, self.shapes, self.shape_cache)

    def run(self, e, path=""):
        if isinstance(e, Const):
            return e.array[None]
        if isinstance(e, (Var, Param)):
            try:
                return self.values[e.name]
            except KeyError:
                raise UnknownName(e.name) from None
        prim = PRIMITIVES[e.op]
        args = [self.run(a, f"{path}.{i + 1}" if path else str(i + 1)) for i, a in enumerate(e.args)]
        shapes = [self.shape(a) for a in e.args]
        result = self.shape(e)
        ctx = _Ctx(self.strict)
        ctx.path, ctx.node = path, e
        with np.errstate(all="ignore"):
            out = np.asarray(prim.fn(args, shapes, result, ctx), dtype=float)
            if prim.predicate:
                ok = (out < 0) if prim.strict else (out <= self.tol)
                ok = ok & ~np.isnan(out)
                if ctx.bad is not None:
                    ok = ok & ~ctx.bad
                return ok
            if ctx.bad is not None:
                out = np.array(out, dtype=float)
                out[ctx.bad] = np.nan
        if self.strict and not np.all(np.isfinite(out)):
            raise DomainError(path, "non-finite result", e)
        return out

    def violation(self, e):
        """Nonnegative violation amount of a predicate, batched."""
        prim = PRIMITIVES[e.op]
        args = [self.run(a, str(i + 1)) for i, a in enumerate(e.args)]
        shapes = [self.shape(a) for a in e.args]
        ctx = _Ctx(self.strict)
        ctx.node = e
        with np.errstate(all="ignore"):
            out = np.asarray(prim.fn(args, shapes, SCALAR, ctx), dtype=float)
        if ctx.bad is not None:
            out = np.where(ctx.bad, np.inf, out)
        return np.where(np.isnan(out), np.inf, np.maximum(out, 0.0))


def _prepare(assignment, shapes, batch):
    all_shapes = dict(shapes or {})
    values = {}
    sizes = set()
    for name, v in assignment.items():
        arr = np.asarray(v, dtype=float)
        if name not in all_shapes:
            if batch:
                raise ShapeError(f"batched evaluation needs a declared shape for {name!r}")
            all_shapes[name] = _infer_shape(arr)
        shp = all_shapes[name]
        if batch and arr.ndim == shp.ndim + 1:
            sizes.add(arr.shape[0])
        elif arr.shape == shp.dims:
            arr = arr[None]
        else:
            raise ShapeError(f"value for {name!r} has array shape {arr.shape}, expected {shp}")
        values[name] = arr
    sizes.discard(1)
    if len(sizes) > 1:
        raise ShapeError("inconsistent batch sizes")
    return values, all_shapes


def evaluate(e: Expr, assignment: Mapping, *, shapes: Mapping[str, Shape] = None, tol: float = FEAS_TOL):
    """Value of ``e`` at a single point.

    Returns a float for scalar expressions, an ndarray for vector/matrix
    expressions and a bool for predicates (relations and cones, with
    non-strict memberships checked up to ``tol``).  Raises
    :class:`DomainError` instead of producing NaN or infinities.
    """
    values, all_shapes = _prepare(assignment, shapes, batch=False)
    ev = _Evaluator(values, all_shapes, tol, strict=True)
    out = ev.run(e)
    if out.dtype == bool:
        return bool(out[0])
    res = out[0]
    return float(res) if res.ndim == 0 else res


def evaluate_batch(
    e: Expr,
    assignment: Mapping,
    shapes: Mapping[str, Shape],
    *,
    tol: float = FEAS_TOL,
    strict: bool = False,
) -> np.ndarray:
    """Vectorised evaluation over a batch of points.

    Each value in ``assignment`` has a leading batch axis (or none, to be
    broadcast).  With ``strict=False`` domain violations produce NaN (for
    values) or False (for predicates) instead of raising.
    """
    values, all_shapes = _prepare(assignment, shapes, batch=True)
    ev = _Evaluator(values, all_shapes, tol, strict=strict)
    return ev.run(e)


def violation(e: Expr, assignment: Mapping, *, shapes: Mapping[str, Shape] = None) -> float:
    """Amount by which predicate ``e`` is violated at a point (0 if it holds).

    Strict predicates report the non-strict violation; domain errors count as
    infinite violation.
    """
    if not is_predicate(e):
        raise ShapeError("violation() expects a relation or cone predicate")
    values, all_shapes = _prepare(assignment, shapes, batch=False)
    ev = _Evaluator(values, all_shapes, FEAS_TOL, strict=False)
    return float(ev.violation(e)[0])


def violation_batch(e: Expr, assignment: Mapping, shapes: Mapping[str, Shape]) -> np.ndarray:
    values, all_shapes = _prepare(assignment, shapes, batch=True)
    ev = _Evaluator(values, all_shapes, FEAS_TOL, strict=False)
    return ev.violation(e)


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class VarDecl:
    name: str
    shape: Shape = SCALAR


ParamDecl = VarDecl


@dataclass(frozen=True)
class Constraint:
    name: str
    body: Expr

    def __post_init__(self):
        if not is_predicate(self.body):
            raise ModelError(f"constraint {self.name!r} is not a relation or cone predicate")


@dataclass(frozen=True)
class Problem:
    vars: tuple
    objective: Expr
    constraints: tuple = ()
    sense: str = "minimize"
    params: tuple = ()
    assumptions: tuple = ()

    def __post_init__(self):
        for fld in ("vars", "constraints", "params", "assumptions"):
            object.__setattr__(self, fld, tuple(getattr(self, fld)))
        if self.sense not in ("minimize", "maximize"):
            raise ModelError(f"bad sense {self.sense!r}")
        names = [d.name for d in self.vars] + [d.name for d in self.params]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ModelError(f"duplicate declarations: {', '.join(sorted(dup))}")
        cnames = [c.name for c in self.constraints] + [c.name for c in self.assumptions]
        dup = {n for n in cnames if cnames.count(n) > 1}
        if dup:
            raise ModelError(f"duplicate constraint names: {', '.join(sorted(dup))}")
        var_names = {d.name for d in self.vars}
        param_names = {d.name for d in self.params}
        for what, e in [("objective", self.objective)] + [(c.name, c.body) for c in self.constraints]:
            _check_leaves(e, var_names, param_names, what)
        for c in self.assumptions:
            _check_leaves(c.body, set(), param_names, c.name)
        env = self.shapes
        cache = {}
        if shape_of(self.objective, env, cache) != SCALAR or is_predicate(self.objective):
            raise ModelError("objective must be a scalar expression")
        for c in self.constraints + self.assumptions:
            shape_of(c.body, env, cache)

    @property
    def shapes(self) -> dict:
        return {d.name: d.shape for d in self.vars + self.params}

    @property
    def var_names(self) -> list:
        return [d.name for d in self.vars]

    def constraint(self, name: str) -> Constraint:
        for c in self.constraints:
            if c.name == name:
                return c
        raise KeyError(name)

    def objective_value(self, a: Mapping) -> float:
        """Objective in the problem's own sense."""
        return evaluate(self.objective, a, shapes=self.shapes)

    def is_feasible(self, a: Mapping, tol: float = FEAS_TOL) -> bool:
        sh = self.shapes
        for c in self.constraints:
            try:
                if not evaluate(c.body, a, shapes=sh, tol=tol):
                    return False
            except DomainError:
                return False
        return True

    def max_violation(self, a: Mapping) -> float:
        sh = self.shapes
        return max((violation(c.body, a, shapes=sh) for c in self.constraints), default=0.0)


def _check_leaves(e, var_names, param_names, where):
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            if n.name not in var_names:
                raise ModelError(f"{where}: {n.name!r} is not a declared variable")
        elif isinstance(n, Param):
            if n.name not in param_names:
                raise ModelError(f"{where}: {n.name!r} is not a declared parameter")
        elif isinstance(n, Apply):
            stack.extend(n.args)


def normalize_sense(p: Problem) -> Problem:
    """Express a maximization problem as minimization of the negated objective."""
    if p.sense == "minimize":
        return p
    return Problem(p.vars, Apply("neg", (p.objective,)), p.constraints, "minimize", p.params, p.assumptions)


def bind_params(p: Problem, values: Mapping = None) -> Problem:
    """Substitute numeric values for every parameter.

    Assumptions are kept (now constant) so that background conditions can be
    discharged against them; each must hold for the supplied values.
    """
    values = dict(values or {})
    missing = {d.name for d in p.params} - set(values)
    if missing:
        raise UnboundParameter(missing)
    mapping = {}
    for d in p.params:
        c = Const(values[d.name])
        if c.shape != d.shape:
            raise ShapeError(f"parameter {d.name!r} expects {d.shape}, got {c.shape}")
        mapping[d.name] = c
    sub = lambda e: substitute(e, mapping)
    assumptions = tuple(Constraint(c.name, sub(c.body)) for c in p.assumptions)
    for c in assumptions:
        if not evaluate(c.body, {}):
            raise ModelError(f"assumption {c.name!r} does not hold for the given parameter values")
    return Problem(
        p.vars,
        sub(p.objective),
        tuple(Constraint(c.name, sub(c.body)) for c in p.constraints),
        p.sense,
        (),
        assumptions,
    )


def check_assignment(p: Problem, a: Mapping) -> None:
    """Raise unless ``a`` covers exactly the problem's variables with the right shapes."""
    names = set(p.var_names)
    if set(a) != names:
        extra = sorted(set(a) - names)
        missing = sorted(names - set(a))
        raise ModelError(f"assignment mismatch (missing {missing}, extra {extra})")
    for d in p.vars:
        arr = np.asarray(a[d.name], dtype=float)
        if arr.shape != d.shape.dims:
            raise ShapeError(f"{d.name}: expected {d.shape}, got array shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"{d.name}: non-finite value")
        if d.shape.kind == "matrix" and not np.array_equal(arr, arr.T):
            raise ModelError(f"{d.name}: matrix value is not symmetric")


# ---------------------------------------------------------------------------
# affine analysis

Coef = Union[float, Expr]


def _isnum(c) -> bool:
    return isinstance(c, float)


def as_coef_expr(c: Coef) -> Expr:
    return Const(c) if _isnum(c) else c


def cadd(a: Coef, b: Coef) -> Coef:
    if _isnum(a) and _isnum(b):
        return a + b
    if _isnum(a) and a == 0:
        return b
    if _isnum(b) and b == 0:
        return a
    return Apply("add", (as_coef_expr(a), as_coef_expr(b)))


def cneg(a: Coef) -> Coef:
    if _isnum(a):
        return -a
    return Apply("neg", (a,))


def cmul(a: Coef, b: Coef) -> Coef:
    if _isnum(a) and _isnum(b):
        return a * b
    if (_isnum(a) and a == 0) or (_isnum(b) and b == 0):
        return 0.0
    if _isnum(a) and a == 1:
        return b
    if _isnum(b) and b == 1:
        return a
    return Apply("mul", (as_coef_expr(a), as_coef_expr(b)))


def cdiv(a: Coef, b: Coef) -> Coef:
    if _isnum(a) and _isnum(b):
        return a / b
    if _isnum(a) and a == 0:
        return 0.0
    if _isnum(b) and b == 1:
        return a
    return Apply("div", (as_coef_expr(a), as_coef_expr(b)))


@dataclass(frozen=True)
class AffineForm:
    """``sum(coeffs[c] * c) + const`` over scalar coordinates.

    Coefficients are floats, or expressions when they involve unbound
    parameters.  Zero coefficients are never stored.
    """

    coeffs: Mapping = field(default_factory=dict)
    const: Coef = 0.0

    def __post_init__(self):
        clean = {k: v for k, v in self.coeffs.items() if not (_isnum(v) and v == 0)}
        object.__setattr__(self, "coeffs", dict(sorted(clean.items(), key=lambda kv: coord_key(kv[0]))))

    @property
    def is_constant(self) -> bool:
        return not self.coeffs

    @property
    def is_numeric(self) -> bool:
        return _isnum(self.const) and all(_isnum(v) for v in self.coeffs.values())

    def __add__(self, other: "AffineForm") -> "AffineForm":
        coeffs = dict(self.coeffs)
        for k, v in other.coeffs.items():
            coeffs[k] = cadd(coeffs.get(k, 0.0), v)
        return AffineForm(coeffs, cadd(self.const, other.const))

    def __neg__(self) -> "AffineForm":
        return AffineForm({k: cneg(v) for k, v in self.coeffs.items()}, cneg(self.const))

    def __sub__(self, other):
        return self + (-other)

    def scale(self, s: Coef) -> "AffineForm":
        return AffineForm({k: cmul(s, v) for k, v in self.coeffs.items()}, cmul(s, self.const))

    def evaluate(self, assignment: Mapping) -> float:
        def coef(c):
            return c if _isnum(c) else evaluate(c, {k: v for k, v in assignment.items()})

        total = coef(self.const)
        for c, k in self.coeffs.items():
            if isinstance(c, str):
                x = assignment[c]
            else:
                x = np.asarray(assignment[c[0]])[tuple(c[1:])]
            total += coef(k) * float(x)
        return float(total)


def _obj_array(shape: Shape, fill=None):
    arr = np.empty(shape.dims, dtype=object)
    for idx in np.ndindex(*shape.dims):
        arr[idx] = fill() if fill else AffineForm()
    return arr


def _lin_map(f, *arrs):
    out = np.empty(arrs[0].shape, dtype=object)
    for idx in np.ndindex(*arrs[0].shape):
        out[idx] = f(*(a[idx] for a in arrs))
    return out


class _NotAffine(Exception):
    pass


class _Affine:
    """Structural affine analysis producing object arrays of AffineForm."""

    def __init__(self, var_shapes: Mapping[str, Shape], shapes: Mapping[str, Shape]):
        self.var_shapes = dict(var_shapes)
        self.shapes = dict(shapes)
        self.cache = {}

    def shape(self, e):
        return shape_of(e, self.shapes, self.cache)

    def const_entries(self, e: Expr, shape: Shape):
        names = free_names(e)
        if not names:
            try:
                val = np.asarray(evaluate(e, {}), dtype=float)
            except DomainError:
                raise _NotAffine() from None
            return _lin_map(lambda v: AffineForm({}, float(v)), np.asarray(val, dtype=object).reshape(shape.dims))
        if shape == SCALAR:
            out = np.empty((), dtype=object)
            out[()] = AffineForm({}, e)
            return out
        out = np.empty(shape.dims, dtype=object)
        for idx in np.ndindex(*shape.dims):
            out[idx] = AffineForm({}, Apply("entry", (e,) + tuple(Const(i) for i in idx)))
        return out

    def var_entries(self, name: str, shape: Shape):
        out = np.empty(shape.dims, dtype=object)
        if shape.kind == "scalar":
            out[()] = AffineForm({name: 1.0})
        elif shape.kind == "vector":
            for i in range(shape.n):
                out[i] = AffineForm({(name, i): 1.0})
        else:
            for i in range(shape.n):
                for j in range(shape.n):
                    out[i, j] = AffineForm({(name, min(i, j), max(i, j)): 1.0})
        return out

    def run(self, e: Expr):
        shape = self.shape(e)
        if isinstance(e, Var) and e.name in self.var_shapes:
            return self.var_entries(e.name, shape)
        if not (free_vars(e) & set(self.var_shapes)):
            return self.const_entries(e, shape)
        if not isinstance(e, Apply):
            raise _NotAffine()
        op, args = e.op, e.args
        sh = [self.shape(a) for a in args]
        if op in ("add", "sub"):
            x, y = self.run(args[0]), self.run(args[1])
            x, y = self._bcast(x, sh[0], shape), self._bcast(y, sh[1], shape)
            return _lin_map((lambda p, q: p + q) if op == "add" else (lambda p, q: p - q), x, y)
        if op == "neg":
            return _lin_map(lambda p: -p, self.run(args[0]))
        if op == "mul":
            return self._mul(args, sh, shape)
        if op == "div":
            if free_vars(args[1]) & set(self.var_shapes):
                raise _NotAffine()
            d = self.run(args[1])[()]
            if _isnum(d.const) and d.const == 0:
                raise _NotAffine()
            return _lin_map(lambda p: p.scale(cdiv(1.0, d.const)), self.run(args[0]))
        if op == "sum":
            x = self.run(args[0])
            total = AffineForm()
            for idx in np.ndindex(*x.shape):
                total = total + x[idx]
            return _scalar(total)
        if op == "trace":
            x = self.run(args[0])
            total = AffineForm()
            for i in range(x.shape[0]):
                total = total + x[i, i]
            return _scalar(total)
        if op == "diag":
            x = self.run(args[0])
            out = np.empty((x.shape[0],), dtype=object)
            for i in range(x.shape[0]):
                out[i] = x[i, i]
            return out
        if op in ("diagMat", "triu"):
            x = self.run(args[0])
            out = np.empty(x.shape, dtype=object)
            for i, j in np.ndindex(*x.shape):
                keep = (i == j) if op == "diagMat" else (i <= j)
                out[i, j] = x[i, j] if keep else AffineForm()
            return out
        if op == "transpose":
            return self.run(args[0]).T.copy()
        if op == "blockMat":
            parts = [self.run(a) for a in args]
            return np.block([[parts[0], parts[1]], [parts[2], parts[3]]])
        if op == "entry":
            x = self.run(args[0])
            idx = []
            for a in args[1:]:
                if not isinstance(a, Const) or a.value != int(a.value):
                    raise _NotAffine()
                idx.append(int(a.value))
            return _scalar(x[tuple(idx)])
        if op == "vec":
            parts = [self.run(a)[()] for a in args]
            out = np.empty((len(parts),), dtype=object)
            for i, p in enumerate(parts):
                out[i] = p
            return out
        raise _NotAffine()

    def _bcast(self, x, s: Shape, target: Shape):
        if s == target:
            return x
        out = np.empty(target.dims, dtype=object)
        for idx in np.ndindex(*target.dims):
            out[idx] = x[()]
        return out

    def _mul(self, args, sh, shape):
        vs = set(self.var_shapes)
        left_var = bool(free_vars(args[0]) & vs)
        right_var = bool(free_vars(args[1]) & vs)
        if left_var and right_var:
            raise _NotAffine()
        x, y = self.run(args[0]), self.run(args[1])
        if sh[0] == SCALAR or sh[1] == SCALAR:
            if sh[0] == SCALAR:
                s, other = x[()], y
                s_var = left_var
            else:
                s, other = y[()], x
                s_var = right_var
            if s_var:
                # scalar variable part times constant array
                return _lin_map(lambda c: s.scale(c.const), other)
            return _lin_map(lambda p: p.scale(s.const), other)
        # matrix-matrix or matrix-vector product with one constant side
        if y.ndim == 1:
            y2 = y.reshape(-1, 1)
        else:
            y2 = y
        n, m = x.shape[0], y2.shape[1]
        out = np.empty((n, m), dtype=object)
        for i in range(n):
            for j in range(m):
                acc = AffineForm()
                for k in range(x.shape[1]):
                    p, q = x[i, k], y2[k, j]
                    if left_var:
                        acc = acc + p.scale(q.const)
                    else:
                        acc = acc + q.scale(p.const)
                out[i, j] = acc
        return out.reshape(-1) if y.ndim == 1 else out


def _scalar(form: AffineForm):
    out = np.empty((), dtype=object)
    out[()] = form
    return out


def _var_shapes(vars, shapes):
    if isinstance(vars, Mapping):
        return dict(vars)
    out = {}
    for v in vars:
        if isinstance(v, VarDecl):
            out[v.name] = v.shape
        else:
            out[v] = (shapes or {}).get(v, SCALAR)
    return out


def affine_entries(e: Expr, vars, shapes: Mapping[str, Shape] = None):
    """Entrywise affine forms of ``e`` (an object ndarray), or None."""
    var_shapes = _var_shapes(vars, shapes)
    env = dict(shapes or {})
    env.update(var_shapes)
    for name in free_names(e):
        env.setdefault(name, SCALAR)
    try:
        return _Affine(var_shapes, env).run(e)
    except _NotAffine:
        return None


def affine_form(e: Expr, vars, shapes: Mapping[str, Shape] = None):
    """Affine form of scalar ``e`` in ``vars``, or ``None`` when not affine.

    ``vars`` is a list of names (scalars unless ``shapes`` says otherwise),
    a list of :class:`VarDecl`, or a name -> Shape mapping.  Names that are
    not listed are treated as symbolic constants, so parameters end up inside
    coefficients.  Predicates are never affine.
    """
    if is_predicate(e):
        return None
    entries = affine_entries(e, vars, shapes)
    if entries is None:
        return None
    if entries.shape != ():
        raise ShapeError("affine_form expects a scalar expression; use affine_entries")
    return entries[()]


def is_affine(e: Expr, vars, shapes=None) -> bool:
    return not is_predicate(e) and affine_entries(e, vars, shapes) is not None

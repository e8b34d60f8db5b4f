"""Numerical checking of reductions: samplers, equivalence checks, grid oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .canon import Reduction, canonicalize, forward_apply_batch
from .errors import Infeasible, MapMismatch, ModelError, SamplerExhausted, UnboundParameter
from .expr import (
    FEAS_TOL,
    Apply,
    Const,
    Problem,
    Var,
    affine_entries,
    coords_of,
    evaluate,
    evaluate_batch,
    normalize_sense,
    violation,
    violation_batch,
)
from .parser import parse_expr, parse_problem, print_expr
from .sampling import SampleConfig, batch_len, concat, head, jsonable, point, take

#: Default tolerance for objective comparisons.
OBJ_TOL = 1e-8
#: Tolerance used to decide membership of *sampled* points; tighter than
#: FEAS_TOL so that images under the maps are checked with headroom.
SAMPLE_TOL = 1e-12


# ---------------------------------------------------------------------------
# coordinates


def _coords(p: Problem) -> list:
    out = []
    for d in p.vars:
        out += coords_of(d.name, d.shape)
    return out


def to_matrix(batch: Mapping, p: Problem) -> np.ndarray:
    cols = []
    for d in p.vars:
        x = np.asarray(batch[d.name], dtype=float)
        k = x.shape[0]
        if d.shape.kind == "scalar":
            cols.append(x.reshape(k, 1))
        elif d.shape.kind == "vector":
            cols.append(x.reshape(k, -1))
        else:
            iu = np.triu_indices(d.shape.n)
            cols.append(x[:, iu[0], iu[1]])
    return np.concatenate(cols, axis=1)


def from_matrix(X: np.ndarray, p: Problem) -> dict:
    out, j = {}, 0
    k = X.shape[0]
    for d in p.vars:
        if d.shape.kind == "scalar":
            out[d.name] = X[:, j].copy()
            j += 1
        elif d.shape.kind == "vector":
            out[d.name] = X[:, j : j + d.shape.n].copy()
            j += d.shape.n
        else:
            n = d.shape.n
            m = n * (n + 1) // 2
            M = np.zeros((k, n, n))
            iu = np.triu_indices(n)
            M[:, iu[0], iu[1]] = X[:, j : j + m]
            M[:, iu[1], iu[0]] = X[:, j : j + m]
            out[d.name] = M
            j += m
    return out


def _equality_system(p: Problem, coords: list = None):
    """Affine equality constraints of ``p`` as (A, b) over ``coords`` (default:
    all of them), or None.  Rows touching other coordinates are skipped."""
    coords = _coords(p) if coords is None else coords
    index = {c: i for i, c in enumerate(coords)}
    var_shapes = {d.name: d.shape for d in p.vars}
    rows, rhs = [], []
    for c in p.constraints:
        body = c.body
        if body.op == "eq":
            e = Apply("sub", (body.args[1], body.args[0]))
        elif body.op == "zeroCone":
            e = body.args[0]
        else:
            continue
        entries = affine_entries(e, var_shapes, p.shapes)
        if entries is None:
            continue
        for idx in np.ndindex(*entries.shape):
            f = entries[idx]
            if not f.is_numeric or any(k not in index for k in f.coeffs) or not f.coeffs:
                continue
            row = np.zeros(len(coords))
            for k, v in f.coeffs.items():
                row[index[k]] = v
            rows.append(row)
            rhs.append(-f.const)
    if not rows:
        return None
    return np.array(rows), np.array(rhs)


# ---------------------------------------------------------------------------
# sampling


def _box_pairs(p: Problem, cfg: SampleConfig, boxes: Mapping = None) -> list:
    out = []
    for d in p.vars:
        if boxes and d.name in boxes:
            lo, hi = boxes[d.name]
        else:
            lo, hi = cfg.box_for(d.name)
        out.append((d, np.broadcast_to(np.asarray(lo, float), d.shape.dims), np.broadcast_to(np.asarray(hi, float), d.shape.dims)))
    return out


def _draw_problem(rng, p, pairs, k) -> dict:
    batch = {}
    for d, lo, hi in pairs:
        x = lo + (hi - lo) * rng.uniform(size=(k,) + d.shape.dims)
        if d.shape.kind == "matrix":
            x = np.triu(x) + np.swapaxes(np.triu(x, 1), -1, -2)
        batch[d.name] = x
    return batch


def feasible_mask(p: Problem, batch: Mapping, tol: float = FEAS_TOL) -> np.ndarray:
    k = batch_len(batch)
    mask = np.ones(k, dtype=bool)
    sh = p.shapes
    for c in p.constraints:
        mask &= evaluate_batch(c.body, batch, sh, tol=tol)
    return mask


def sample_feasible_batch(
    p: Problem,
    cfg: SampleConfig,
    *,
    tol: float = FEAS_TOL,
    boxes: Mapping = None,
    stream: int = 0,
    proposal: Callable = None,
) -> dict:
    """Batched version of :func:`sample_feasible`.

    With ``proposal(rng, k) -> batch`` half of every draw comes from the
    proposal instead of the uniform box.
    """
    if p.params:
        raise UnboundParameter([d.name for d in p.params])
    rng = cfg.rng(stream)
    pairs = _box_pairs(p, cfg, boxes)
    system = _equality_system(p)
    if system is not None:
        A, b = system
        pinv = np.linalg.pinv(A)
    parts, count, attempts = [], 0, 0
    while count < cfg.n and attempts < cfg.max_attempts:
        k = min(max(4 * cfg.n, 2048), cfg.max_attempts - attempts)
        attempts += k
        batch = _draw_problem(rng, p, pairs, k)
        if proposal is not None:
            extra = proposal(rng, k // 2)
            batch = {n: np.concatenate([v[: k - k // 2], np.asarray(extra[n], dtype=float)]) for n, v in batch.items()}
        if system is not None:
            X = to_matrix(batch, p)
            X = X - (X @ A.T - b) @ pinv.T
            batch = from_matrix(X, p)
        mask = feasible_mask(p, batch, tol)
        parts.append(take(batch, mask))
        count += int(mask.sum())
    got = head(concat(parts), cfg.n)
    if count < cfg.n:
        raise SamplerExhausted(count, cfg.n, [point(got, i) for i in range(batch_len(got))])
    return got


def sample_feasible(p: Problem, cfg: SampleConfig, *, tol: float = FEAS_TOL, boxes: Mapping = None) -> list:
    """Up to ``cfg.n`` feasible assignments drawn uniformly from the box.

    Affine equality constraints are enforced by projecting the uniform draws
    onto their solution set; everything else is rejection sampling.
    Deterministic for a given seed; raises SamplerExhausted (carrying the
    partial list) when the attempt budget runs out.
    """
    batch = sample_feasible_batch(p, cfg, tol=tol, boxes=boxes)
    return [point(batch, i) for i in range(batch_len(batch))]


# ---------------------------------------------------------------------------
# maps


@dataclass
class ExprMap:
    """A map between problems given by one expression per target variable."""

    exprs: dict
    source: Problem
    target: Problem

    def __call__(self, batch: Mapping) -> dict:
        sh = self.source.shapes
        src = {d.name: batch[d.name] for d in self.source.vars}
        k = batch_len(src)
        out = {}
        for d in self.target.vars:
            v = evaluate_batch(self.exprs[d.name], src, sh)
            out[d.name] = np.broadcast_to(v, (k,) + d.shape.dims).copy()
        return out

    def text(self) -> str:
        return "\n".join(f"{n} := {print_expr(e)}" for n, e in self.exprs.items())


def identity_map(source: Problem, target: Problem) -> ExprMap:
    return ExprMap({d.name: Var(d.name) for d in target.vars}, source, target)


def _projection(names):
    def psi(batch):
        return {n: batch[n] for n in names}

    return psi


# ---------------------------------------------------------------------------
# reports


@dataclass
class Clause:
    name: str
    passed: bool
    worst: float
    samples: int
    witness: Optional[dict] = None
    detail: str = ""

    def to_dict(self) -> dict:
        return jsonable(
            {
                "clause": self.name,
                "status": "pass" if self.passed else "fail",
                "worst": self.worst,
                "samples": self.samples,
                "detail": self.detail,
                "witness": self.witness,
            }
        )


@dataclass
class EquivReport:
    """Outcome of a strong-equivalence check.

    ``status`` is ``pass``, ``fail`` or ``inconclusive`` (the sampler could not
    find enough feasible points; never counted as a pass).
    """

    status: str
    mode: str
    clauses: list = field(default_factory=list)
    forward_samples: int = 0
    backward_samples: int = 0
    message: str = ""
    _replayers: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def clause(self, name: str) -> Clause:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list:
        return [c for c in self.clauses if not c.passed]

    @property
    def max_forward_gap(self) -> float:
        for name in ("forward-gap", "forward-objective"):
            try:
                return self.clause(name).worst
            except KeyError:
                pass
        return float("nan")

    @property
    def max_backward_violation(self) -> float:
        try:
            return self.clause("backward-objective").worst
        except KeyError:
            return float("nan")

    def replay(self, name: str) -> float:
        """Recompute a failed clause at its witness with single-point evaluation."""
        c = self.clause(name)
        if c.witness is None:
            raise ValueError(f"clause {name} has no witness")
        return self._replayers[name](c.witness)

    def text(self) -> str:
        lines = [f"status {self.status}", f"mode {self.mode}"]
        lines.append(f"samples forward={self.forward_samples} backward={self.backward_samples}")
        if self.message:
            lines.append(f"note {self.message}")
        for c in self.clauses:
            lines.append(f"clause {c.name} {'pass' if c.passed else 'fail'} worst={c.worst:.6g} samples={c.samples}")
            if c.detail:
                lines.append(f"  detail {c.detail}")
            if c.witness is not None:
                w = ", ".join(f"{k}={_short(v)}" for k, v in c.witness.items())
                lines.append(f"  witness {w}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "mode": self.mode,
            "forward_samples": self.forward_samples,
            "backward_samples": self.backward_samples,
            "message": self.message,
            "clauses": [c.to_dict() for c in self.clauses],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _short(v) -> str:
    a = np.asarray(v)
    if a.ndim == 0:
        return f"{float(a):.9g}"
    return np.array2string(a, precision=6, separator=",").replace("\n", "")


def _worst_clause(name, viol, limit, witness_batch, detail=""):
    viol = np.asarray(viol, dtype=float)
    viol = np.where(np.isnan(viol), np.inf, viol)
    if viol.size == 0:
        return Clause(name, True, 0.0, 0, None, detail)
    i = int(np.argmax(viol))
    worst = float(viol[i])
    passed = worst <= limit
    return Clause(name, passed, worst, len(viol), None if passed else point(witness_batch, i), detail)


def _constraint_violation(p: Problem, batch: Mapping) -> np.ndarray:
    k = batch_len(batch)
    worst = np.zeros(k)
    sh = p.shapes
    for c in p.constraints:
        worst = np.maximum(worst, violation_batch(c.body, batch, sh))
    return worst


def _objective(p: Problem, batch: Mapping) -> np.ndarray:
    v = evaluate_batch(p.objective, {d.name: batch[d.name] for d in p.vars}, p.shapes)
    return np.broadcast_to(v, (batch_len(batch),)).astype(float)


def _prefixed(batch: Mapping, prefix: str) -> dict:
    return {prefix + k: v for k, v in batch.items()}


def _split(w: Mapping, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in w.items() if k.startswith(prefix)}


def _derived_boxes(images: Mapping, keep: Mapping) -> dict:
    """Sampling boxes around forward images, padded by max(1, range/2)."""
    boxes = dict(keep)
    for name, v in images.items():
        if name in boxes:
            continue
        a = np.asarray(v, dtype=float)
        a = np.where(np.isfinite(a), a, np.nan)
        lo, hi = np.nanmin(a, axis=0), np.nanmax(a, axis=0)
        pad = np.maximum(1.0, 0.5 * (hi - lo))
        boxes[name] = (lo - pad, hi + pad)
    return boxes


def _near_images(images: Mapping, boxes: Mapping, Q: Problem) -> Callable:
    """Proposal: forward images with per-coordinate noise at log-uniform
    scales (1e-4 to 1 times the box width).  Uniform box draws rarely come
    close to the graph of phi, which is where a missing constraint shows."""
    names = [d.name for d in Q.vars]
    k0 = batch_len(images)
    finite = np.ones(k0, dtype=bool)
    for n in names:
        a = np.asarray(images[n], dtype=float).reshape(k0, -1)
        finite &= np.all(np.isfinite(a), axis=1)
    base = take({n: images[n] for n in names}, finite)
    k0 = batch_len(base)

    def propose(rng, k):
        idx = rng.integers(0, max(k0, 1), size=k)
        out = {}
        for d in Q.vars:
            lo, hi = boxes[d.name]
            width = np.broadcast_to(np.asarray(hi, float) - np.asarray(lo, float), d.shape.dims)
            x = np.asarray(base[d.name], dtype=float)[idx] if k0 else np.zeros((k,) + d.shape.dims)
            scale = width * 10.0 ** rng.uniform(-4, 0, size=(k,) + (1,) * len(d.shape.dims))
            noise = scale * rng.standard_normal((k,) + d.shape.dims)
            if d.shape.kind == "matrix":
                noise = 0.5 * (noise + np.swapaxes(noise, -1, -2))
            out[d.name] = x + noise
        return out

    return propose


# ---------------------------------------------------------------------------
# equivalence


def check_strong_equivalence(
    P: Problem,
    Q: Problem,
    phi: Callable,
    psi: Callable,
    cfg: SampleConfig = None,
    tol: float = OBJ_TOL,
    *,
    feas_tol: float = FEAS_TOL,
    exact: bool = False,
    mode: str = "strong",
    q_boxes: Mapping = None,
    node_trees: Mapping = None,
) -> EquivReport:
    """Check the equivalence clauses between ``P`` and ``Q`` on samples.

    ``phi`` and ``psi`` map batches of assignments (dicts of arrays with a
    leading sample axis).  Both problems are compared in minimization form.
    Forward: ``phi(x)`` is Q-feasible and ``g(phi(x)) <= f(x) + tol``.
    Backward: ``psi(y)`` is P-feasible and ``f(psi(y)) <= g(y) + tol``.
    With ``exact`` (compiler reductions) also ``|g(phi(x)) - f(x)| <= tol`` and
    ``psi(phi(x)) == x``.  ``mode="monotone"`` replaces the objective clauses
    by order agreement, a surrogate for reductions that change the objective
    by a strictly increasing transform.
    """
    cfg = cfg or SampleConfig()
    P, Q = normalize_sense(P), normalize_sense(Q)
    report = EquivReport("pass", "monotone (surrogate: order agreement)" if mode == "monotone" else mode)
    try:
        xs = sample_feasible_batch(P, cfg, tol=SAMPLE_TOL, stream=0)
    except SamplerExhausted as ex:
        report.status = "inconclusive"
        report.message = f"forward sampling: {ex}"
        return report
    report.forward_samples = batch_len(xs)
    ys = phi(xs)
    f = _objective(P, xs)
    g = _objective(Q, ys)
    both = {**_prefixed(xs, "P:"), **_prefixed(ys, "Q:")}
    clauses = report.clauses

    def replay_fwd_feas(w):
        return max((violation(c.body, _split(w, "Q:"), shapes=Q.shapes) for c in Q.constraints), default=0.0)

    clauses.append(_worst_clause("forward-feasibility", _constraint_violation(Q, ys), feas_tol, both))
    report._replayers["forward-feasibility"] = replay_fwd_feas
    if mode == "monotone":
        clauses.append(_order_clause("forward-order", f, g, xs, tol))
    else:
        clauses.append(_worst_clause("forward-objective", np.maximum(g - f, 0.0), tol, both))
        report._replayers["forward-objective"] = lambda w: max(
            evaluate(Q.objective, _split(w, "Q:"), shapes=Q.shapes) - evaluate(P.objective, _split(w, "P:"), shapes=P.shapes), 0.0
        )
    if exact:
        clauses.append(_worst_clause("forward-gap", np.abs(g - f), tol, both))
        report._replayers["forward-gap"] = lambda w: abs(
            evaluate(Q.objective, _split(w, "Q:"), shapes=Q.shapes) - evaluate(P.objective, _split(w, "P:"), shapes=P.shapes)
        )
        back = psi(ys)
        same = np.ones(batch_len(xs), dtype=bool)
        for d in P.vars:
            a = np.asarray(xs[d.name]).reshape(len(same), -1)
            b = np.asarray(back[d.name]).reshape(len(same), -1)
            same &= np.all(a == b, axis=1)
        clauses.append(_worst_clause("roundtrip", (~same).astype(float), 0.0, xs, "psi(phi(x)) == x exactly"))

    # backward: sample Q around the forward images
    # Every Q variable is boxed around its forward images (padded, so points
    # outside the image of phi are reached); explicit per-name boxes win.
    keep = {}
    if isinstance(cfg.box, Mapping):
        keep.update({k: v for k, v in cfg.box.items() if k in Q.shapes})
    if q_boxes:
        keep.update(q_boxes)
    boxes = _derived_boxes(ys, keep)
    try:
        qs = sample_feasible_batch(
            Q, cfg, tol=SAMPLE_TOL, boxes=boxes, stream=1, proposal=_near_images(ys, boxes, Q)
        )
    except SamplerExhausted as ex:
        report.status = "inconclusive"
        report.message = f"backward sampling: {ex}"
        return _finish(report)
    report.backward_samples = batch_len(qs)
    xb = psi(qs)
    gb = _objective(Q, qs)
    fb = _objective(P, xb)
    both_b = {**_prefixed(xb, "P:"), **_prefixed(qs, "Q:")}
    clauses.append(_worst_clause("backward-feasibility", _constraint_violation(P, xb), feas_tol, both_b))
    report._replayers["backward-feasibility"] = lambda w: max(
        (violation(c.body, _split(w, "P:"), shapes=P.shapes) for c in P.constraints), default=0.0
    )
    if mode == "monotone":
        clauses.append(_order_clause("backward-order", gb, fb, qs, tol))
    else:
        clauses.append(_worst_clause("backward-objective", np.maximum(fb - gb, 0.0), tol, both_b))
        report._replayers["backward-objective"] = lambda w: max(
            evaluate(P.objective, _split(w, "P:"), shapes=P.shapes) - evaluate(Q.objective, _split(w, "Q:"), shapes=Q.shapes), 0.0
        )
    if node_trees:
        clauses.append(_node_clause(node_trees, P, Q, qs, tol, feas_tol))
    return _finish(report)


def _finish(report: EquivReport) -> EquivReport:
    if report.status != "inconclusive" and any(not c.passed for c in report.clauses):
        report.status = "fail"
    elif report.status == "inconclusive" and any(not c.passed for c in report.clauses):
        report.status = "fail"
    return report


def _order_clause(name, a, b, batch, tol) -> Clause:
    """Pairs whose order under ``a`` and ``b`` disagree (beyond ``tol``)."""
    k = len(a)
    rng = np.random.default_rng(k)
    i = rng.integers(0, k, size=4 * k)
    j = rng.integers(0, k, size=4 * k)
    da, db = a[i] - a[j], b[i] - b[j]
    bad = ((da > tol) & (db < -tol)) | ((da < -tol) & (db > tol))
    viol = np.where(bad, np.minimum(np.abs(da), np.abs(db)), 0.0)
    if not bad.any():
        return Clause(name, True, 0.0, len(viol))
    m = int(np.argmax(viol))
    w = {**_prefixed(point(batch, int(i[m])), "first:"), **_prefixed(point(batch, int(j[m])), "second:")}
    return Clause(name, False, float(viol[m]), len(viol), w, "objective order disagrees")


def _node_clause(trees, P, Q, qs, tol, feas_tol) -> Clause:
    """Check rexpr (in Q) against oexpr (in P) at every tree node."""
    worst = np.zeros(batch_len(qs))
    where = [""] * batch_len(qs)
    shapes = Q.shapes
    orig = {d.name: qs[d.name] for d in P.vars}
    for tree in trees.values():
        for n in tree.walk():
            if n.rexpr is None:
                continue
            if n.atom is not None and n.atom.is_predicate:
                r = evaluate_batch(n.rexpr, qs, shapes, tol=feas_tol)
                o = evaluate_batch(n.oexpr, orig, P.shapes, tol=feas_tol)
                v = (r & ~o).astype(float)
            else:
                r = evaluate_batch(n.rexpr, qs, shapes)
                o = evaluate_batch(n.oexpr, orig, P.shapes)
                if n.role == "convex":
                    d = o - r
                elif n.role == "concave":
                    d = r - o
                else:
                    d = np.abs(r - o)
                d = np.asarray(d, dtype=float)
                d = d.reshape(d.shape[0], -1).max(axis=1) if d.ndim > 1 else d
                v = np.where(np.isnan(d), np.inf, np.maximum(d, 0.0))
            v = np.broadcast_to(v, worst.shape)
            upd = v > worst
            for idx in np.nonzero(upd)[0]:
                where[idx] = n.id
            worst = np.maximum(worst, v)
    c = _worst_clause("node-relation", worst, tol, qs)
    if not c.passed:
        c.detail = f"at node {where[int(np.argmax(worst))]}"
    return c


def check_reduction(
    p: Problem, cfg: SampleConfig = None, tol: float = OBJ_TOL, *, feas_tol: float = FEAS_TOL, reduction: Reduction = None
) -> EquivReport:
    """Check a compiler reduction of ``p`` (canonicalized here unless given)."""
    if reduction is None:
        _, reduction = canonicalize(p)
    Q = reduction.target.problem
    return check_strong_equivalence(
        reduction.source,
        Q,
        lambda b: forward_apply_batch(reduction, b),
        _projection(reduction.target.original_vars),
        cfg,
        tol,
        feas_tol=feas_tol,
        exact=True,
        node_trees=reduction.target.trees,
    )


# ---------------------------------------------------------------------------
# user reductions


@dataclass
class UserMaps:
    phi: dict  # Q variable -> expression text over P variables
    psi: dict  # P variable -> expression text over Q variables
    mode: str = "strong"


def parse_maps(text: str) -> UserMaps:
    """Parse a maps file: ``phi <var> := <expr>``, ``psi <var> := <expr>``,
    optional ``mode strong|monotone``; ``--`` comments."""
    phi, psi, mode = {}, {}, "strong"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("--", 1)[0].strip()
        if not line:
            continue
        head_, _, rest = line.partition(" ")
        if head_ == "mode":
            mode = rest.strip()
            if mode not in ("strong", "monotone"):
                raise MapMismatch(f"line {lineno}: unknown mode {mode!r}")
            continue
        if head_ not in ("phi", "psi") or ":=" not in rest:
            raise MapMismatch(f"line {lineno}: expected 'phi|psi <var> := <expr>'")
        name, _, expr = rest.partition(":=")
        target = phi if head_ == "phi" else psi
        name = name.strip()
        if name in target:
            raise MapMismatch(f"line {lineno}: {head_} defines {name!r} twice")
        target[name] = expr.strip()
    return UserMaps(phi, psi, mode)


def _build_map(defs: Mapping, source: Problem, target: Problem, label: str) -> ExprMap:
    want = [d.name for d in target.vars]
    missing = [n for n in want if n not in defs]
    extra = [n for n in defs if n not in want]
    if missing or extra:
        raise MapMismatch(f"{label} must define exactly {want}: missing {missing}, extra {extra}")
    exprs = {}
    for n in want:
        e = defs[n]
        if isinstance(e, str):
            e = parse_expr(e, vars=[d.name for d in source.vars])
        exprs[n] = e
    return ExprMap(exprs, source, target)


def check_user_reduction(
    P_text,
    Q_text,
    phi_exprs: Mapping = None,
    psi_exprs: Mapping = None,
    cfg: SampleConfig = None,
    *,
    maps: UserMaps = None,
    mode: str = None,
    tol: float = OBJ_TOL,
    feas_tol: float = FEAS_TOL,
) -> EquivReport:
    """Check a user-supplied reduction between two problems given as text
    (or Problem objects) with map expressions in the opposite problem's
    variables."""
    P = parse_problem(P_text) if isinstance(P_text, str) else P_text
    Q = parse_problem(Q_text) if isinstance(Q_text, str) else Q_text
    if maps is not None:
        phi_exprs, psi_exprs = maps.phi, maps.psi
        mode = mode or maps.mode
    phi = _build_map(phi_exprs or {}, P, Q, "phi")
    psi = _build_map(psi_exprs or {}, Q, P, "psi")
    return check_strong_equivalence(P, Q, phi, psi, cfg, tol, feas_tol=feas_tol, mode=mode or "strong")


# ---------------------------------------------------------------------------
# brute force


def _grid_axes(p: Problem, grid: int, box) -> list:
    coords = _coords(p)
    if isinstance(box, Mapping):
        per = []
        for d in p.vars:
            lo, hi = box[d.name] if d.name in box else box.get("*", (-10.0, 10.0))
            per += [(lo, hi)] * len(coords_of(d.name, d.shape))
    elif len(box) == 2 and np.isscalar(box[0]):
        per = [tuple(box)] * len(coords)
    else:
        per = [tuple(b) for b in box]
    if len(per) != len(coords):
        raise ModelError(f"box gives {len(per)} ranges for {len(coords)} coordinates")
    return [np.linspace(lo, hi, grid) for lo, hi in per]


def brute_force_optimum(
    p: Problem,
    grid_per_dim: int,
    box,
    *,
    feas_tol: float = FEAS_TOL,
    lift: Callable = None,
    chunk: int = 1_000_000,
):
    """Exhaustive grid search; returns ``(value, argmin)`` for the
    minimization form of ``p``.

    ``box`` is one ``(lo, hi)`` pair for every coordinate, a list of pairs
    (one per scalar coordinate), or a name -> pair mapping.  With ``lift`` the
    grid ranges over ``p``'s first variables only and ``lift`` extends each
    batch to the rest (used to search a reduced problem through its forward
    map).  Grid points are first projected onto the affine equality
    constraints over the gridded coordinates, since an equality almost never
    holds exactly at grid nodes.  Raises Infeasible when no grid point is
    feasible.
    """
    if p.params:
        raise UnboundParameter([d.name for d in p.params])
    q = normalize_sense(p)
    if lift is not None:
        grid_problem = Problem(tuple(d for d in q.vars if d.name in _lift_domain(lift, q)), Const(0.0))
    else:
        grid_problem = q
    axes = _grid_axes(grid_problem, grid_per_dim, box)
    total = int(np.prod([len(a) for a in axes]))
    if total > 10**8:
        raise ModelError(f"grid of {total} points exceeds the 1e8 limit")
    system = _equality_system(q, _coords(grid_problem))
    if system is not None:
        A, b = system
        pinv = np.linalg.pinv(A)
    best_val, best_pt = np.inf, None
    sizes = [len(a) for a in axes]
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        cols = np.unravel_index(idx, sizes)
        X = np.stack([a[c] for a, c in zip(axes, cols)], axis=1)
        if system is not None:
            X = X - (X @ A.T - b) @ pinv.T
        batch = from_matrix(X, grid_problem)
        if lift is not None:
            batch = lift(batch)
        mask = feasible_mask(q, batch, feas_tol)
        if not mask.any():
            continue
        vals = np.where(mask, _objective(q, batch), np.inf)
        vals = np.where(np.isnan(vals), np.inf, vals)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_pt = float(vals[i]), point(batch, i)
    if best_pt is None:
        raise Infeasible(f"no feasible point on the {total}-point grid")
    return best_val, best_pt


def _lift_domain(lift, q):
    names = getattr(lift, "domain", None)
    if names is None:
        raise ModelError("lift functions must carry a 'domain' attribute naming the gridded variables")
    return set(names)


def forward_lift(reduction: Reduction):
    """Lift for :func:`brute_force_optimum` that completes original-variable
    grid points with the forward map."""

    def lift(batch):
        return forward_apply_batch(reduction, batch)

    lift.domain = tuple(reduction.target.original_vars)
    return lift


@dataclass
class OptimaComparison:
    p_value: float
    q_value: float
    step: float
    lipschitz: float

    @property
    def difference(self) -> float:
        return abs(self.p_value - self.q_value)

    @property
    def bound(self) -> float:
        return 2.0 * self.step * self.lipschitz

    @property
    def agrees(self) -> bool:
        return self.difference <= self.bound


def local_lipschitz(p: Problem, center: Mapping, radius: float, cfg: SampleConfig = None) -> float:
    """Largest difference quotient of the objective over feasible sample
    pairs within ``radius`` (per coordinate) of ``center``."""
    q = normalize_sense(p)
    cfg = cfg or SampleConfig(n=300)
    boxes = {
        d.name: (np.asarray(center[d.name]) - radius, np.asarray(center[d.name]) + radius) for d in q.vars
    }
    xs = sample_feasible_batch(q, SampleConfig(n=cfg.n, seed=cfg.seed, max_attempts=cfg.max_attempts), boxes=boxes)
    X = to_matrix(xs, q)
    f = _objective(q, xs)
    i, j = np.triu_indices(len(f), 1)
    dist = np.linalg.norm(X[i] - X[j], axis=1)
    ok = dist > 1e-9
    return float(np.max(np.abs(f[i] - f[j])[ok] / dist[ok]))


def compare_optima(
    p: Problem, grid_box: list, *, grid_p: int = 1001, budget: float = 2e7, cfg: SampleConfig = None
) -> OptimaComparison:
    """Brute-force optima of ``p`` and of its canonicalization over a full
    grid of (original, fresh) coordinates.

    Fresh coordinates range over their forward images at feasible points of
    a coarse grid of ``grid_box``; the grid density of the reduced problem is
    chosen so that the total stays within ``budget`` points.  The Lipschitz
    estimate is local to P's grid argmin and covers both the original
    objective and the reduced objective's coefficients.
    """
    _, red = canonicalize(p)
    Q = red.target.problem
    q = normalize_sense(p)
    vp, arg = brute_force_optimum(q, grid_p, grid_box)
    coarse = _grid_axes(q, 101, grid_box)
    X = np.stack([a.ravel() for a in np.meshgrid(*coarse, indexing="ij")], axis=1)
    batch = from_matrix(X, q)
    with np.errstate(all="ignore"):
        batch = take(batch, feasible_mask(q, batch, 1e-2))
        images = forward_apply_batch(red, batch)
    boxes = list(grid_box)
    for d in Q.vars:
        if d.name in red.target.original_vars:
            continue
        v = np.asarray(images[d.name], dtype=float).reshape(batch_len(images), -1)
        for col in v.T:
            col = col[np.isfinite(col)]
            boxes.append((float(col.min()), float(col.max()) + 1e-9))
    gq = int(min(grid_p, budget ** (1.0 / len(boxes))))
    vq, _ = brute_force_optimum(Q, gq, boxes)
    step = max(max((hi - lo) / (grid_p - 1) for lo, hi in grid_box), max((hi - lo) / (gq - 1) for lo, hi in boxes))
    radius = 0.1 * max(hi - lo for lo, hi in grid_box)
    lip = local_lipschitz(q, arg, radius, cfg)
    coef = affine_entries(Q.objective, {d.name: d.shape for d in Q.vars}, Q.shapes)[()]
    lip = max(lip, float(sum(abs(v) for v in coef.coeffs.values())))
    return OptimaComparison(vp, vq, step, lip)

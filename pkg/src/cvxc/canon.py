"""DCP canonicalization: atom trees, graph substitution and witness maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .atoms import AtomDecl, AtomRegistry, Match, builtin_registry, match_atom
from .errors import (
    DomainError,
    NotDCP,
    StrictConstraintSurvives,
    UnboundParameter,
    UndischargedCondition,
)
from .expr import (
    SCALAR,
    Apply,
    Constraint,
    Expr,
    Problem,
    Shape,
    Var,
    VarDecl,
    affine_entries,
    evaluate,
    evaluate_batch,
    free_names,
    free_vars,
    is_cone,
    is_predicate,
    normalize_sense,
    substitute,
)
from .parser import print_expr, print_problem

ROLES = ("convex", "concave", "affine")
NEGATE = {"convex": "concave", "concave": "convex", "affine": "affine"}
STRICT_OPS = ("lt", "posDef")


def child_role(parent: str, mono: str) -> str:
    if mono == "increasing":
        return parent
    if mono == "decreasing":
        return NEGATE[parent]
    return "affine"


def _curvature_fits(curv: str, role: str) -> bool:
    return curv == "affine" or curv == role


@dataclass
class TreeNode:
    id: str
    role: str
    oexpr: Expr
    atom: Optional[AtomDecl] = None
    match: Optional[Match] = None
    children: list = field(default_factory=list)
    used: dict = field(default_factory=dict)  # vcond text -> discharging constraint name
    fresh: dict = field(default_factory=dict)  # impl var -> fresh variable name
    rexpr: Optional[Expr] = None

    @property
    def is_leaf(self) -> bool:
        return self.atom is None

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def used_constraints(self) -> set:
        return {name for n in self.walk() for name in n.used.values() if name is not None}

    def render(self) -> list:
        lines = []
        for n in self.walk():
            if n.is_leaf:
                what = f"leaf {print_expr(n.oexpr)}"
            else:
                what = n.atom.name
                if n.fresh:
                    what += " (" + ", ".join(n.fresh.values()) + ")"
            line = f"{n.id:<12} {what}  [{n.role}]"
            for cond, by in n.used.items():
                line += f"  {cond} discharged by {by or 'evaluation'}"
            lines.append(line)
        return lines


# ---------------------------------------------------------------------------
# condition discharge


def _lead_normalize(form, signed: bool):
    if not form.is_numeric:
        return form
    if not form.coeffs:
        return form
    lead = next(iter(form.coeffs.values()))  # coeffs are sorted by coordinate
    s = lead if signed else abs(lead)
    return form.scale(1.0 / s)


def _forms_equal(a, b, tol=1e-12) -> bool:
    if set(a.coeffs) != set(b.coeffs):
        return False
    pairs = [(a.coeffs[k], b.coeffs[k]) for k in a.coeffs] + [(a.const, b.const)]
    for x, y in pairs:
        if isinstance(x, float) and isinstance(y, float):
            if abs(x - y) > tol * (1 + max(abs(x), abs(y))):
                return False
        elif x != y:
            return False
    return True


def normal_form(c: Expr, var_shapes: Mapping[str, Shape], env: Mapping[str, Shape]):
    """Canonical affine description of a condition or constraint, or None.

    Returns ``(kind, strict, forms)`` where kind is ``ineq`` (forms >= 0),
    ``eq`` (forms = 0) or ``pd``/``psd`` (matrix forms); each form is scaled
    so its lexicographically first coefficient is +1 (magnitude 1 for
    inequalities, where the sign carries meaning).
    """
    if not isinstance(c, Apply):
        return None
    op = c.op
    if op in ("le", "lt"):
        body, kind, strict = Apply("sub", (c.args[1], c.args[0])), "ineq", op == "lt"
    elif op == "eq":
        body, kind, strict = Apply("sub", (c.args[1], c.args[0])), "eq", False
    elif op == "posOrthCone":
        body, kind, strict = c.args[0], "ineq", False
    elif op == "zeroCone":
        body, kind, strict = c.args[0], "eq", False
    elif op in ("posDef", "psdCone"):
        body, kind, strict = c.args[0], ("pd" if op == "posDef" else "psd"), False
    else:
        return None
    entries = affine_entries(body, var_shapes, env)
    if entries is None:
        return None
    flat = [entries[idx] for idx in np.ndindex(*entries.shape)]
    if kind in ("ineq", "eq"):
        flat = [_lead_normalize(f, signed=(kind == "eq")) for f in flat]
    return kind, strict, flat


def _implies(have, want) -> bool:
    hk, hs, hf = have
    wk, ws, wf = want
    if len(hf) != len(wf):
        return False
    if hk == wk:
        if ws and not hs:
            return False
    elif not (hk == "pd" and wk == "psd"):
        return False
    return all(_forms_equal(a, b) for a, b in zip(hf, wf))


def discharge(
    cond: Expr, available, var_shapes: Mapping[str, Shape], env: Mapping[str, Shape]
) -> Optional[str]:
    """Name of the constraint in ``available`` that discharges ``cond``.

    Returns ``""`` when ``cond`` involves no variables and holds numerically,
    and None when nothing discharges it.
    """
    if not free_vars(cond) & set(var_shapes) and not free_names(cond) - set(env):
        if not free_names(cond):
            try:
                if evaluate(cond, {}):
                    return ""
            except DomainError:
                return None
    want = normal_form(cond, var_shapes, env)
    if want is None:
        return None
    for c in available:
        have = normal_form(c.body, var_shapes, env)
        if have is not None and _implies(have, want):
            return c.name
    return None


def _bcond_holds(cond: Expr, assumptions, env) -> bool:
    if not free_names(cond):
        try:
            return bool(evaluate(cond, {}))
        except DomainError:
            return False
    # symbolic parameters: structural discharge against the assumptions
    params = {n: env.get(n, SCALAR) for n in free_names(cond)}
    want = normal_form(cond, params, env)
    if want is None:
        return False
    for a in assumptions:
        have = normal_form(a.body, params, env)
        if have is not None and _implies(have, want):
            return True
    return False


# ---------------------------------------------------------------------------
# trees


def build_tree(
    e: Expr,
    role: str,
    available=(),
    assumptions=(),
    *,
    shapes: Mapping[str, Shape],
    var_names=None,
    registry: AtomRegistry = None,
    path: str = "obj",
) -> TreeNode:
    """DCP atom tree for ``e`` in the given role.

    ``shapes`` covers every name in ``e``; ``var_names`` (default: all names in
    ``shapes``) are the optimization variables, the rest are parameters.
    Leaves are maximal affine subexpressions.  Raises NotDCP or
    UndischargedCondition with the dotted node path.
    """
    registry = registry or builtin_registry()
    env = dict(shapes)
    var_names = set(env) if var_names is None else set(var_names)
    var_shapes = {n: env[n] for n in var_names}
    cache = {}
    return _build(e, role, list(available), list(assumptions), env, var_shapes, registry, path, cache)


def _build(e, role, available, assumptions, env, var_shapes, registry, path, cache) -> TreeNode:
    if not is_predicate(e) and affine_entries(e, var_shapes, env) is not None:
        return TreeNode(path, role, e)
    mismatch, nonconst = None, None
    chosen = None
    for d in registry:
        m = match_atom(d, e, env, cache)
        if m is None:
            continue
        if not _curvature_fits(d.curvature, role):
            mismatch = mismatch or d
            continue
        aux_ok = all(
            not (free_vars(m.args[a.name]) & set(var_shapes)) for a in d.args if a.mono == "auxiliary"
        )
        if not aux_ok:
            nonconst = nonconst or d
            continue
        if not all(_bcond_holds(substitute(c, m.args), assumptions, env) for _, c in d.bconds):
            continue
        chosen = m
        break
    if chosen is None:
        if mismatch is not None:
            raise NotDCP(path, "curvature-mismatch", f"{mismatch.name} is {mismatch.curvature}, {role} required")
        if nonconst is not None:
            raise NotDCP(path, "non-affine-leaf", f"auxiliary argument of {nonconst.name} must be constant")
        what = "affine" if role == "affine" else "matched by an atom"
        raise NotDCP(path, "unmatched-atom", f"{print_expr(e)} is not {what}")
    d = chosen.atom
    node = TreeNode(path, d.curvature if d.curvature != "affine" else role, e, d, chosen)
    for _, c in d.vconds:
        inst = substitute(c, chosen.args)
        by = discharge(inst, available, var_shapes, env)
        if by is None:
            raise UndischargedCondition(path, print_expr(inst))
        node.used[print_expr(inst)] = by or None
    for i, a in enumerate(d.args):
        sub = chosen.args[a.name]
        cpath = f"{path}.{i + 1}"
        if a.mono == "auxiliary":
            node.children.append(TreeNode(cpath, "affine", sub))
            continue
        node.children.append(
            _build(sub, child_role(node.role, a.mono), available, assumptions, env, var_shapes, registry, cpath, cache)
        )
    return node


def check_roles(tree: TreeNode, var_shapes, env) -> None:
    """Re-walk a tree asserting the role propagation rules; raises AssertionError."""
    for n in tree.walk():
        if n.is_leaf:
            assert affine_entries(n.oexpr, var_shapes, env) is not None, n.id
            continue
        assert n.role in ROLES
        if n.atom.curvature != "affine":
            assert n.role == n.atom.curvature, n.id
        for a, c in zip(n.atom.args, n.children):
            if a.mono == "auxiliary":
                assert c.is_leaf and not free_vars(c.oexpr) & set(var_shapes), c.id
            else:
                assert c.role == child_role(n.role, a.mono), c.id


# ---------------------------------------------------------------------------
# reduction


@dataclass
class ReducedProblem:
    problem: Problem
    original_vars: tuple
    fresh_vars: tuple
    provenance: dict  # reduced constraint name -> description
    eliminated: tuple  # original constraints dropped as discharged conditions
    trees: dict  # component name -> TreeNode

    @property
    def vars(self):
        return self.problem.vars

    @property
    def objective(self):
        return self.problem.objective

    @property
    def constraints(self):
        return self.problem.constraints

    def text(self) -> str:
        return print_problem(self.problem)

    def explain(self) -> str:
        lines = []
        for name, tree in self.trees.items():
            lines.append(f"{name}:")
            lines += ["  " + line for line in tree.render()]
        lines.append("provenance:")
        lines += [f"  {k} <- {v}" for k, v in self.provenance.items()]
        if self.eliminated:
            lines.append("eliminated: " + ", ".join(self.eliminated))
        return "\n".join(lines)


@dataclass
class Reduction:
    """Witness maps between the (sense-normalized) source and its reduction.

    ``interp`` gives each fresh variable as an expression over the original
    variables; the forward map evaluates them, the backward map projects.
    """

    original: Problem
    source: Problem  # normalized to minimize
    target: ReducedProblem
    interp: dict

    @property
    def sense_sign(self) -> float:
        return -1.0 if self.original.sense == "maximize" else 1.0

    def forward(self, a: Mapping) -> dict:
        return forward_apply(self, a)

    def backward(self, a: Mapping) -> dict:
        return backward_apply(self, a)


def forward_apply(r: Reduction, a: Mapping) -> dict:
    out = {n: a[n] for n in r.target.original_vars}
    shapes = r.source.shapes
    for z, e in r.interp.items():
        out[z] = evaluate(e, {n: a[n] for n in r.target.original_vars}, shapes=shapes)
    return out


def forward_apply_batch(r: Reduction, batch: Mapping) -> dict:
    out = {n: batch[n] for n in r.target.original_vars}
    shapes = r.source.shapes
    for z, e in r.interp.items():
        out[z] = evaluate_batch(e, {n: batch[n] for n in r.target.original_vars}, shapes)
    return out


def backward_apply(r: Reduction, a: Mapping) -> dict:
    return {n: a[n] for n in r.target.original_vars}


def _fresh_names(taken):
    k = 0
    while True:
        name = f"t.{k}"
        k += 1
        if name not in taken:
            yield name


def canonicalize(p: Problem, registry: AtomRegistry = None):
    """Reduce ``p`` to conic form; returns ``(ReducedProblem, Reduction)``."""
    if p.params:
        raise UnboundParameter([d.name for d in p.params])
    registry = registry or builtin_registry()
    q = normalize_sense(p)
    env = q.shapes
    var_shapes = {d.name: d.shape for d in q.vars}
    cons = list(q.constraints)

    def tree_for(e, role, path, available):
        return _build(e, role, available, list(q.assumptions), env, var_shapes, registry, path, {})

    obj_tree = tree_for(q.objective, "convex", "obj", cons)
    trees, errors, strict = {}, {}, set()
    for c in cons:
        if c.body.op in STRICT_OPS:
            strict.add(c.name)
            continue
        others = [o for o in cons if o.name != c.name]
        try:
            trees[c.name] = tree_for(c.body, "concave", c.name, others)
        except (NotDCP, UndischargedCondition) as ex:
            errors[c.name] = ex

    # a constraint is dropped when a surviving component relies on it as a
    # condition; iterate down to the largest self-consistent set
    used = {name: t.used_constraints() for name, t in trees.items()}
    obj_used = obj_tree.used_constraints()
    consumed = set(obj_used).union(*used.values()) if used else set(obj_used)
    while True:
        keep = {
            c for c in consumed if c in obj_used or any(c in u for k, u in used.items() if k not in consumed)
        }
        if keep == consumed:
            break
        consumed = keep

    kept = [c for c in cons if c.name not in consumed]
    for c in kept:
        if c.name in errors:
            raise errors[c.name]
        if c.name in strict:
            raise StrictConstraintSurvives(c.name)

    components = [("obj", obj_tree)] + [(c.name, trees[c.name]) for c in kept]
    taken = set(env)
    names = _fresh_names(taken)
    fresh_decls = []
    for _, tree in components:
        for n in tree.walk():
            if n.is_leaf:
                continue
            for v, shape_t in n.atom.impl_vars:
                z = next(names)
                n.fresh[v] = z
                fresh_decls.append(VarDecl(z, shape_t.resolve(n.match.dims)))

    interp = {}
    graph = []

    def reduce_node(n: TreeNode):
        if n.is_leaf:
            n.rexpr = n.oexpr
            return
        for c in n.children:
            reduce_node(c)
        mapping = {a.name: c.rexpr for a, c in zip(n.atom.args, n.children)}
        mapping.update({v: Var(z) for v, z in n.fresh.items()})
        n.rexpr = substitute(n.atom.impl_objective, mapping)
        child_only = {a.name: c.rexpr for a, c in zip(n.atom.args, n.children)}
        for v, sol in n.atom.solution:
            interp[n.fresh[v]] = substitute(substitute(sol, child_only), interp)

    for _, tree in components:
        reduce_node(tree)
        for n in tree.walk():
            if n.is_leaf:
                continue
            mapping = {a.name: c.rexpr for a, c in zip(n.atom.args, n.children)}
            mapping.update({v: Var(z) for v, z in n.fresh.items()})
            for cname, c in n.atom.impl_constraints:
                graph.append((n, cname, substitute(c, mapping)))

    out_cons, provenance = [], {}
    taken_c = set()
    for c in kept:
        name = c.name + "'"
        out_cons.append(Constraint(name, trees[c.name].rexpr))
        provenance[name] = f"constraint {c.name}"
        taken_c.add(name)
    k = len(cons)
    for n, cname, body in graph:
        k += 1
        while f"c{k}'" in taken_c:
            k += 1
        name = f"c{k}'"
        taken_c.add(name)
        out_cons.append(Constraint(name, body))
        provenance[name] = f"{n.id} {n.atom.name} {cname}"

    fresh_order = [d.name for d in fresh_decls]
    interp = {z: interp[z] for z in fresh_order}
    reduced = Problem(tuple(q.vars) + tuple(fresh_decls), obj_tree.rexpr, tuple(out_cons), "minimize")
    rp = ReducedProblem(
        reduced,
        tuple(d.name for d in q.vars),
        tuple(fresh_order),
        provenance,
        tuple(c.name for c in cons if c.name in consumed),
        dict(components),
    )
    assert_conic(reduced)
    return rp, Reduction(p, q, rp, interp)


def assert_conic(p: Problem) -> None:
    """Raise NotDCP unless the objective is affine and every constraint is a
    cone membership of affine arguments."""
    var_shapes = {d.name: d.shape for d in p.vars}
    env = p.shapes
    if affine_entries(p.objective, var_shapes, env) is None:
        raise NotDCP("obj", "non-affine-leaf", "reduced objective is not affine")
    for c in p.constraints:
        if not is_cone(c.body):
            raise NotDCP(c.name, "unmatched-atom", "reduced constraint is not a cone")
        for a in c.body.args:
            if affine_entries(a, var_shapes, env) is None:
                raise NotDCP(c.name, "non-affine-leaf", "cone argument is not affine")

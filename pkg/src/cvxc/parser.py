"""Parser and printer for the problem DSL.

A problem looks like::

    parameters (a : R)
    assuming
      ha : 0 < a
    optimization (x y : R)
      maximize sqrt (x - y)
      subject to
        c1 : y = a*x - 3
        c2 : x^2 <= 2

Function application is juxtaposition (``sqrt (x - y)``, ``expCone t 1 x``),
``![a, b]`` is a vector and ``!![a, b; c, d]`` a matrix literal.  ``--``
starts a comment.  Unicode ``≤ ≥ ℝ ∑`` are accepted for ``<= >= R sum``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ArityMismatch, DslSyntaxError, ParseError, UnknownIdentifier
from .expr import (
    PRIMITIVES,
    SCALAR,
    Apply,
    Const,
    Constraint,
    Expr,
    Param,
    Problem,
    Shape,
    Var,
    VarDecl,
    is_predicate,
    matrix,
    vector,
)


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int
    length: int = 0


@dataclass(frozen=True)
class Token:
    kind: str  # num, ident, kw, sym, eof
    text: str
    span: SourceSpan


KEYWORDS = {
    "optimization",
    "minimize",
    "maximize",
    "subject",
    "to",
    "parameters",
    "assuming",
}

# surface spellings that differ from primitive names
ALIASES = {"tr": "trace", "∑": "sum"}
REAL_NAMES = {"R", "ℝ", "real"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>--[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_ℝ][A-Za-z0-9_']*(?:\.[A-Za-z0-9_']+)*)
  | (?P<sym>!!\[|!\[|:=|<=|>=|≤|≥|∑|[()\[\],;:+\-*/^=<>?&])
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            span = SourceSpan(line, pos - line_start + 1, 1)
            raise ParseError(f"unexpected character {text[pos]!r}", span)
        kind = m.lastgroup
        s = m.group()
        span = SourceSpan(line, pos - line_start + 1, len(s))
        if kind == "ident" and s in KEYWORDS:
            kind = "kw"
        if kind not in ("ws", "comment"):
            toks.append(Token(kind, s, span))
        nl = s.count("\n")
        if nl:
            line += nl
            line_start = pos + s.rfind("\n") + 1
        pos = m.end()
    toks.append(Token("eof", "", SourceSpan(line, pos - line_start + 1, 0)))
    return toks


def _describe(tok: Token) -> str:
    return "end of input" if tok.kind == "eof" else tok.text


class Parser:
    """Recursive-descent parser over a token list.

    ``names`` maps identifiers to ``"var"`` or ``"param"``; anything else that
    is not a function name is an unknown identifier.
    """

    def __init__(self, text: str, names: dict = None):
        self.toks = tokenize(text)
        self.i = 0
        self.names = dict(names or {})
        self.stopwords = set()

    # -- token helpers

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, *texts) -> bool:
        return self.tok.kind in ("sym", "kw") and self.tok.text in texts

    def advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def expect(self, *texts) -> Token:
        if not self.at(*texts):
            raise DslSyntaxError(self.tok.span, texts, _describe(self.tok))
        return self.advance()

    def expect_ident(self, what="identifier") -> Token:
        if self.tok.kind != "ident":
            raise DslSyntaxError(self.tok.span, [what], _describe(self.tok))
        return self.advance()

    def expect_int(self) -> int:
        t = self.tok
        if t.kind != "num" or not re.fullmatch(r"\d+", t.text) or int(t.text) < 1:
            raise DslSyntaxError(t.span, ["positive integer"], _describe(t))
        self.advance()
        return int(t.text)

    # -- declarations

    def shape(self) -> Shape:
        t = self.tok
        if t.kind == "ident" and t.text in REAL_NAMES:
            self.advance()
            return SCALAR
        if t.kind == "ident" and t.text in ("matrix", "vector"):
            self.advance()
            n = self.expect_int()
            return matrix(n) if t.text == "matrix" else vector(n)
        raise DslSyntaxError(t.span, ["R", "matrix", "vector"], _describe(t))

    def decl_group(self) -> list:
        self.expect("(")
        names = []
        while self.tok.kind == "ident":
            names.append(self.advance())
        if not names:
            raise DslSyntaxError(self.tok.span, ["identifier"], _describe(self.tok))
        self.expect(":")
        shape = self.shape()
        self.expect(")")
        return [(t, shape) for t in names]

    def declare(self, groups, kind) -> list:
        out = []
        for tok, shape in groups:
            if tok.text in self.names:
                raise ParseError(f"duplicate declaration of {tok.text!r}", tok.span)
            if tok.text in PRIMITIVES or tok.text in ALIASES:
                raise ParseError(f"{tok.text!r} is reserved", tok.span)
            self.names[tok.text] = kind
            out.append(VarDecl(tok.text, shape))
        return out

    # -- expressions

    def relation(self) -> Expr:
        lhs = self.expr()
        if self.at("=", "<=", "≤", ">=", "≥", "<", ">"):
            op = self.advance().text
            rhs = self.expr()
            if op == "=":
                return Apply("eq", (lhs, rhs))
            if op in ("<=", "≤"):
                return Apply("le", (lhs, rhs))
            if op in (">=", "≥"):
                return Apply("le", (rhs, lhs))
            if op == "<":
                return Apply("lt", (lhs, rhs))
            return Apply("lt", (rhs, lhs))
        if not is_predicate(lhs):
            raise DslSyntaxError(self.tok.span, ["relation", "cone constraint"], _describe(self.tok))
        return lhs

    def expr(self) -> Expr:
        e = self.term()
        while self.at("+", "-"):
            op = "add" if self.advance().text == "+" else "sub"
            e = Apply(op, (e, self.term()))
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.at("*", "/"):
            op = "mul" if self.advance().text == "*" else "div"
            e = Apply(op, (e, self.unary()))
        return e

    def unary(self) -> Expr:
        if self.at("-"):
            self.advance()
            if self.tok.kind == "num" and not self.peek().text == "^":
                return Const(-float(self.advance().text))
            return Apply("neg", (self.unary(),))
        return self.power()

    def power(self) -> Expr:
        base = self.application()
        if self.at("^"):
            self.advance()
            return Apply("pow", (base, self.unary()))
        return base

    def _starts_primary(self) -> bool:
        t = self.tok
        if t.kind == "num":
            return True
        if t.kind == "sym":
            return t.text in ("(", "![", "!![")
        if t.kind == "ident":
            if t.text in self.stopwords:
                return False
            # `name :` begins the next named constraint
            return not (self.peek().kind == "sym" and self.peek().text == ":")
        return False

    def application(self) -> Expr:
        t = self.tok
        name = ALIASES.get(t.text, t.text)
        if t.kind in ("ident", "sym") and name in PRIMITIVES and t.text not in self.names:
            self.advance()
            args = []
            while self._starts_primary():
                args.append(self.primary())
            prim = PRIMITIVES[name]
            if not prim.accepts(len(args)):
                expected = prim.arity if isinstance(prim.arity, int) else "/".join(map(str, prim.arity))
                raise ArityMismatch(t.span, t.text, expected, len(args))
            return Apply(name, tuple(args))
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Const(float(t.text))
        if t.kind == "ident":
            kind = self.names.get(t.text)
            if kind is None:
                name = ALIASES.get(t.text, t.text)
                if name in PRIMITIVES:
                    expected = PRIMITIVES[name].arity
                    raise ArityMismatch(t.span, t.text, expected if isinstance(expected, int) else 1, 0)
                raise UnknownIdentifier(t.span, t.text)
            self.advance()
            return Var(t.text) if kind == "var" else Param(t.text)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if self.at("!["):
            self.advance()
            items = self._list("]")
            if all(isinstance(x, Const) and x.shape == SCALAR for x in items):
                return Const(tuple(x.value for x in items))
            return Apply("vec", tuple(items))
        if self.at("!!["):
            self.advance()
            rows = [[]]
            while True:
                x = self.expr()
                if not (isinstance(x, Const) and x.shape == SCALAR):
                    raise ParseError("matrix literal entries must be numbers", t.span)
                rows[-1].append(x.value)
                if self.at(","):
                    self.advance()
                elif self.at(";"):
                    self.advance()
                    rows.append([])
                else:
                    self.expect("]")
                    break
            if any(len(r) != len(rows) for r in rows):
                raise ParseError("matrix literal must be square", t.span)
            return Const(rows)
        raise DslSyntaxError(t.span, ["expression"], _describe(t))

    def _list(self, close) -> list:
        items = [self.expr()]
        while self.at(","):
            self.advance()
            items.append(self.expr())
        self.expect(close)
        return items

    # -- problems

    def named_constraints(self) -> list:
        out = []
        while self.tok.kind == "ident" and self.peek().text == ":":
            name = self.advance().text
            self.advance()
            out.append(Constraint(name, self.relation()))
        return out

    def problem(self) -> Problem:
        params = []
        while self.at("parameters"):
            self.advance()
            groups = []
            while self.at("("):
                groups += self.decl_group()
            if not groups:
                self.expect("(")
            params += self.declare(groups, "param")
        assumptions = []
        if self.at("assuming"):
            self.advance()
            assumptions = self.named_constraints()
            if not assumptions:
                raise DslSyntaxError(self.tok.span, ["named constraint"], _describe(self.tok))
            for c in assumptions:
                bad = [n for n in _leaf_names(c.body) if self.names.get(n) == "var"]
                if bad:
                    raise ParseError(f"assumption {c.name!r} mentions variables")
        self.expect("optimization")
        groups = []
        while self.at("("):
            groups += self.decl_group()
        if not groups:
            self.expect("(")
        vars_ = self.declare(groups, "var")
        sense = self.expect("minimize", "maximize").text
        objective = self.expr()
        constraints = []
        if self.at("subject"):
            self.advance()
            self.expect("to")
            constraints = self.named_constraints()
            if not constraints:
                raise DslSyntaxError(self.tok.span, ["named constraint"], _describe(self.tok))
        if self.tok.kind != "eof":
            raise DslSyntaxError(self.tok.span, ["end of input"], _describe(self.tok))
        return Problem(tuple(vars_), objective, tuple(constraints), sense, tuple(params), tuple(assumptions))


def _leaf_names(e):
    if isinstance(e, (Var, Param)):
        yield e.name
    elif isinstance(e, Apply):
        for a in e.args:
            yield from _leaf_names(a)


def parse_problem(text: str) -> Problem:
    return Parser(text).problem()


def parse_expr(text: str, vars=(), params=()) -> Expr:
    """Parse a standalone expression or predicate over the given names."""
    names = {n: "var" for n in vars}
    names.update({n: "param" for n in params})
    p = Parser(text, names)
    e = p.relation() if _has_relation(p) else p.expr()
    if p.tok.kind != "eof":
        raise DslSyntaxError(p.tok.span, ["end of input"], _describe(p.tok))
    return e


def _has_relation(p: Parser) -> bool:
    rel = {"=", "<=", "≤", ">=", "≥", "<", ">"}
    if any(t.kind == "sym" and t.text in rel for t in p.toks):
        return True
    first = p.toks[0]
    name = ALIASES.get(first.text, first.text)
    return name in PRIMITIVES and PRIMITIVES[name].predicate


# ---------------------------------------------------------------------------
# printing

_INFIX = {"add": ("+", 1), "sub": ("-", 1), "mul": ("*", 2), "div": ("/", 2)}
_REL = {"eq": "=", "le": "<=", "lt": "<"}


def format_float(v: float) -> str:
    s = repr(float(v))
    if s.endswith(".0"):
        s = s[:-2]
    return s


def _const_text(c: Const) -> tuple:
    v = c.value
    if isinstance(v, float):
        return format_float(v), (3 if v < 0 else 6)
    if isinstance(v[0], tuple):
        rows = "; ".join(", ".join(format_float(x) for x in row) for row in v)
        return f"!![{rows}]", 6
    return "![" + ", ".join(format_float(x) for x in v) + "]", 6


def _starts_with_minus(s: str) -> bool:
    return s.startswith("-")


def _fmt(e: Expr) -> tuple:
    """Return (text, precedence) with 0 relation .. 6 atomic."""
    if isinstance(e, Const):
        return _const_text(e)
    if isinstance(e, (Var, Param)):
        return e.name, 6
    op, args = e.op, e.args
    if op in _REL:
        return f"{_wrap(args[0], 1)} {_REL[op]} {_wrap(args[1], 1)}", 0
    if op in _INFIX:
        sym, prec = _INFIX[op]
        return f"{_wrap(args[0], prec)} {sym} {_wrap(args[1], prec + 1)}", prec
    if op == "neg":
        a = args[0]
        inner = _wrap(a, 3)
        if _starts_with_minus(inner) or (isinstance(a, Const) and a.shape == SCALAR):
            inner = f"({_fmt(a)[0]})"
        return "-" + inner, 3
    if op == "pow":
        return f"{_wrap(args[0], 5)}^{_wrap(args[1], 3)}", 4
    if op == "vec":
        return "![" + ", ".join(_fmt(a)[0] for a in args) + "]", 6
    return " ".join([op] + [_wrap(a, 6) for a in args]), 5


def _wrap(e: Expr, min_prec: int) -> str:
    s, p = _fmt(e)
    return s if p >= min_prec else f"({s})"


def print_expr(e: Expr) -> str:
    return _fmt(e)[0]


def _decls(decls) -> str:
    groups = []
    for d in decls:
        if groups and groups[-1][1] == d.shape:
            groups[-1][0].append(d.name)
        else:
            groups.append(([d.name], d.shape))
    return " ".join(f"({' '.join(names)} : {shape})" for names, shape in groups)


def print_problem(p: Problem) -> str:
    lines = []
    if p.params:
        lines.append(f"parameters {_decls(p.params)}")
    if p.assumptions:
        lines.append("assuming")
        lines += [f"  {c.name} : {print_expr(c.body)}" for c in p.assumptions]
    lines.append(f"optimization {_decls(p.vars)}")
    lines.append(f"  {p.sense} {print_expr(p.objective)}")
    if p.constraints:
        lines.append("  subject to")
        lines += [f"    {c.name} : {print_expr(c.body)}" for c in p.constraints]
    return "\n".join(lines) + "\n"

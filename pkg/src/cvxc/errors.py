"""Exception hierarchy shared by every cvxc module."""

from __future__ import annotations


class CvxcError(Exception):
    """Base class for all cvxc errors."""


# -- model / evaluation ------------------------------------------------------


class UnknownName(CvxcError):
    def __init__(self, name: str):
        super().__init__(f"unknown name {name!r}")
        self.name = name


class DomainError(CvxcError):
    """A numeric function was applied outside its domain.

    ``path`` is the dotted child-index path from the evaluated root to the
    offending subexpression (empty string for the root itself).
    """

    def __init__(self, path: str, message: str, expr=None):
        where = path or "<root>"
        super().__init__(f"domain error at {where}: {message}")
        self.path = path
        self.expr = expr


class ShapeError(CvxcError):
    pass


class ModelError(CvxcError):
    """Ill-formed Problem (duplicate names, undeclared identifiers, ...)."""


class UnboundParameter(CvxcError):
    def __init__(self, names):
        names = sorted(names)
        super().__init__(f"parameters must be bound to numeric values: {', '.join(names)}")
        self.names = names


# -- parsing -----------------------------------------------------------------


class ParseError(CvxcError):
    def __init__(self, message: str, span=None):
        if span is not None:
            message = f"{span.line}:{span.column}: {message}"
        super().__init__(message)
        self.span = span


class DslSyntaxError(ParseError):
    def __init__(self, span, expected, found: str = ""):
        expected = sorted(set(expected))
        msg = f"expected {' or '.join(expected)}"
        if found:
            msg += f", found {found!r}"
        super().__init__(msg, span)
        self.expected = expected


class UnknownIdentifier(ParseError):
    def __init__(self, span, name: str):
        super().__init__(f"unknown identifier {name!r}", span)
        self.name = name


class ArityMismatch(ParseError):
    def __init__(self, span, name: str, expected: int, got: int):
        super().__init__(f"{name} expects {expected} argument(s), got {got}", span)
        self.name = name
        self.expected = expected
        self.got = got


# -- atoms / canonicalization ------------------------------------------------


class DuplicateAtom(CvxcError):
    pass


class MalformedGraphImplementation(CvxcError):
    pass


class NotDCP(CvxcError):
    """Raised when no DCP-valid atom tree exists for a component.

    ``reason`` is one of ``curvature-mismatch``, ``non-affine-leaf`` or
    ``unmatched-atom``.
    """

    def __init__(self, path: str, reason: str, detail: str = ""):
        msg = f"{path}: not DCP ({reason})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.path = path
        self.reason = reason
        self.detail = detail


class UndischargedCondition(CvxcError):
    def __init__(self, path: str, condition: str):
        super().__init__(f"UndischargedCondition at {path}: {condition}")
        self.path = path
        self.condition = condition


class StrictConstraintSurvives(CvxcError):
    def __init__(self, name: str):
        super().__init__(
            f"constraint {name!r} is strict and is not consumed as an atom condition"
        )
        self.name = name


# -- verification ------------------------------------------------------------


class SamplerExhausted(CvxcError):
    """Fewer feasible samples than requested were found.

    ``partial`` holds whatever was found before the attempt budget ran out.
    """

    def __init__(self, found: int, wanted: int, partial=()):
        super().__init__(f"sampler exhausted: found {found} of {wanted} feasible points")
        self.found = found
        self.wanted = wanted
        self.partial = list(partial)


class Infeasible(CvxcError):
    pass


class MapMismatch(CvxcError):
    pass


# -- conic io / solver -------------------------------------------------------


class NonConicProblem(CvxcError):
    pass


class SolverError(CvxcError):
    stage = "solve"


class SolverNotFound(SolverError):
    def __init__(self, command):
        super().__init__(f"solver command not found: {command}")
        self.command = command


class SolverTimeout(SolverError):
    def __init__(self, command, timeout: float):
        super().__init__(f"solver timed out after {timeout:g} s: {command}")
        self.command = command
        self.timeout = timeout


class SolverNonzeroExit(SolverError):
    def __init__(self, code: int, stderr: str):
        super().__init__(f"solver exited with code {code}: {stderr}")
        self.code = code
        self.stderr = stderr


class MalformedSolution(SolverError):
    def __init__(self, line: int, message: str):
        super().__init__(f"malformed solution at line {line}: {message}")
        self.line = line


class MissingVariable(SolverError):
    def __init__(self, name: str):
        super().__init__(f"solution is missing variable {name!r}")
        self.name = name

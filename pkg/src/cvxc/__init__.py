"""DCP canonicalization to conic form with checkable reduction witnesses."""

from .atoms import AtomDecl, AtomRegistry, builtin_registry, check_atom_obligations, parse_atoms, register_atom
from .canon import ReducedProblem, Reduction, backward_apply, canonicalize, forward_apply
from .conic import SolveResult, SolverConfig, invoke_solver, parse_solution, solve, write_cbf
from .errors import CvxcError
from .expr import Problem, bind_params, evaluate, normalize_sense
from .parser import parse_expr, parse_problem, print_expr, print_problem
from .sampling import SampleConfig
from .verify import (
    EquivReport,
    brute_force_optimum,
    check_reduction,
    check_strong_equivalence,
    check_user_reduction,
    sample_feasible,
)

__version__ = "0.1.0"

__all__ = [
    "AtomDecl",
    "AtomRegistry",
    "CvxcError",
    "EquivReport",
    "Problem",
    "ReducedProblem",
    "Reduction",
    "SampleConfig",
    "SolveResult",
    "SolverConfig",
    "backward_apply",
    "bind_params",
    "brute_force_optimum",
    "builtin_registry",
    "canonicalize",
    "check_atom_obligations",
    "check_reduction",
    "check_strong_equivalence",
    "check_user_reduction",
    "evaluate",
    "forward_apply",
    "invoke_solver",
    "normalize_sense",
    "parse_atoms",
    "parse_expr",
    "parse_problem",
    "parse_solution",
    "print_expr",
    "print_problem",
    "register_atom",
    "sample_feasible",
    "solve",
    "write_cbf",
]

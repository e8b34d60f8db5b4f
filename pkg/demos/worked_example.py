"""
From a DCP problem to a conic problem and back
==============================================

Run with ``python3 demos/worked_example.py`` or cell by cell in an editor
that understands ``# %%`` markers.
"""

# %%
import sys

from cvxc import canonicalize, parse_problem
from cvxc.conic import SolverConfig, solve, write_cbf
from cvxc.sampling import SampleConfig
from cvxc.verify import check_reduction

SOURCE = """\
optimization (x y : R)
  maximize sqrt (x - y)
  subject to
    c1 : y = 2*x - 3
    c2 : x^2 <= 2
    c3 : 0 <= x - y
"""
p = parse_problem(SOURCE)

# %% [markdown]
# Canonicalization replaces `sqrt` and `square` by their graph
# implementations.  Note that c3 disappears: the rotated cone for sqrt
# already forces x - y >= 0.

# %%
rp, reduction = canonicalize(p)
print(rp.text())
print(rp.explain())

# %%
print(write_cbf(rp))

# %% [markdown]
# The reduction carries its maps.  phi computes the fresh variables from
# the original ones, psi forgets them.  Both directions are sampled.

# %%
report = check_reduction(p, SampleConfig(n=1000, box=(-3, 3)))
print(report.text())

# %% [markdown]
# Solving goes through an external adapter that reads CBF and writes a
# solution file.  The Clarabel adapter ships with the package.

# %%
res = solve(p, SolverConfig(f"{sys.executable} -m cvxc.adapters.clarabel {{input}} {{output}}"))
print(res.status, res.value, res.original)

"""
Covariance estimation through a user reduction
==============================================

The likelihood of zero-mean gaussian samples is not concave in the
covariance R, but after taking logs and substituting S = R^-1 it is.
"""

# %%
import sys

import numpy as np

from cvxc import bind_params, parse_problem
from cvxc.conic import SolverConfig, solve
from cvxc.parser import print_problem
from cvxc.sampling import SampleConfig
from cvxc.verify import check_user_reduction, parse_maps

samples = np.array([[1.0, 0.5], [-0.3, 1.2], [0.8, -0.7]])
Y = samples.T @ samples / len(samples)

P = "optimization (R : matrix 2)\n  maximize " + " * ".join(
    f"gaussianPdf R ![{a}, {b}]" for a, b in samples.tolist()
) + "\n  subject to\n    hR : posDef R\n"
Q = """\
parameters (Y : matrix 2)
optimization (S : matrix 2)
  maximize log (det S) - trace (Y * S)
  subject to
    hS : posDef S
"""
print(P)

# %% [markdown]
# The two objectives differ by a monotone transformation, so the check runs
# in monotone mode: it compares the order of objective values over sampled
# pairs instead of the values themselves.

# %%
q_bound = bind_params(parse_problem(Q), {"Y": Y.tolist()})
maps = parse_maps("phi S := inv R\npsi R := inv S\nmode monotone\n")
report = check_user_reduction(P, print_problem(q_bound), maps=maps, cfg=SampleConfig(n=500, box=(-3, 3)))
print(report.text())

# %%
res = solve(q_bound, SolverConfig(f"{sys.executable} -m cvxc.adapters.clarabel {{input}} {{output}}"))
S = res.original["S"]
print("inverse of S:\n", np.linalg.inv(S))
print("second-moment matrix:\n", Y)

"""Linear, mixed-integer and small quadratic solvers."""

from .model import (
    INF,
    ComplementarityPair,
    ConfigurationError,
    IterationLimitError,
    LinearProgram,
    MixedIntegerProgram,
    QuadraticProgram,
    Solution,
    SolverOptions,
    ValidationError,
)
from .simplex import Basis, DenseForm, dual_objective, solve_dense, solve_lp
from .milp import encode_big_m, solve_milp
from .qp import solve_qp
from .parametric import Affine, ParametricLP

"""Problem containers shared by the LP, MILP and QP routines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

INF = float("inf")
SENSES = ("<=", ">=", "=")


class ValidationError(ValueError):
    """Raised for malformed problem data."""


class IterationLimitError(RuntimeError):
    """Raised when a simplex or branch-and-bound limit is hit."""


class ConfigurationError(ValueError):
    """Raised when a MILP cannot be encoded with the chosen options."""


@dataclass
class SolverOptions:
    feas_tol: float = 1e-7
    opt_tol: float = 1e-9
    gap_tol: float = 1e-6
    int_tol: float = 1e-6
    max_iter: int = 50_000
    max_nodes: int = 200_000
    time_limit: float | None = None
    refactor_every: int = 50
    complementarity: str = "branch"  # "branch" or "bigm"
    pair_rule: str = "first"  # "first" violated pair in declaration order, or "max" violation
    cutoff: float | None = None  # known upper bound on the optimum (model sense)
    log: bool = False


class LinearProgram:
    """Named variables with bounds, sparse rows and a linear objective."""

    def __init__(self, name: str = "lp", sense: str = "min"):
        if sense not in ("min", "max"):
            raise ValidationError(f"objective sense must be min or max, got {sense!r}")
        self.name = name
        self.sense = sense
        self.var_names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.obj: list[float] = []
        self.obj_const = 0.0
        self.rows: list[dict[int, float]] = []
        self.row_senses: list[str] = []
        self.rhs: list[float] = []
        self.row_names: list[str] = []
        self._index: dict[str, int] = {}
        self._row_index: dict[str, int] = {}

    # construction -----------------------------------------------------
    @property
    def num_vars(self) -> int:
        return len(self.var_names)

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def add_var(self, name: str, lb: float = 0.0, ub: float = INF, obj: float = 0.0) -> int:
        if name in self._index:
            raise ValidationError(f"duplicate variable name {name!r}")
        lb, ub = float(lb), float(ub)
        if lb > ub:
            raise ValidationError(f"variable {name!r} has lb {lb} > ub {ub}")
        if np.isnan(lb) or np.isnan(ub):
            raise ValidationError(f"variable {name!r} has a NaN bound")
        self._index[name] = len(self.var_names)
        self.var_names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.obj.append(float(obj))
        return self._index[name]

    def var(self, name: str) -> int:
        return self._index[name]

    def has_var(self, name: str) -> bool:
        return name in self._index

    def add_constraint(
        self, coeffs: Mapping[int, float], sense: str, rhs: float, name: str | None = None
    ) -> int:
        if sense not in SENSES:
            raise ValidationError(f"unknown constraint sense {sense!r}")
        rhs = float(rhs)
        if not np.isfinite(rhs):
            raise ValidationError(f"constraint {name!r} has a non-finite right-hand side")
        row: dict[int, float] = {}
        for j, a in coeffs.items():
            if not 0 <= j < self.num_vars:
                raise ValidationError(f"constraint {name!r} references unknown variable {j}")
            if a != 0.0:
                row[int(j)] = row.get(int(j), 0.0) + float(a)
        if name is None:
            name = f"c{len(self.rows)}"
        if name in self._row_index:
            raise ValidationError(f"duplicate constraint name {name!r}")
        self._row_index[name] = len(self.rows)
        self.rows.append(row)
        self.row_senses.append(sense)
        self.rhs.append(rhs)
        self.row_names.append(name)
        return len(self.rows) - 1

    def row(self, name: str) -> int:
        return self._row_index[name]

    def set_objective(self, coeffs: Mapping[int, float], const: float = 0.0) -> None:
        self.obj = [0.0] * self.num_vars
        for j, a in coeffs.items():
            self.obj[j] += float(a)
        self.obj_const = float(const)

    def add_objective(self, coeffs: Mapping[int, float]) -> None:
        for j, a in coeffs.items():
            self.obj[j] += float(a)

    # views ------------------------------------------------------------
    def dense(self):
        """Return (c, A, senses, b, lb, ub) as numpy arrays for a min problem."""
        m, n = self.num_rows, self.num_vars
        A = np.zeros((m, n))
        for i, row in enumerate(self.rows):
            for j, a in row.items():
                A[i, j] = a
        c = np.asarray(self.obj, dtype=float)
        if self.sense == "max":
            c = -c
        return (
            c,
            A,
            list(self.row_senses),
            np.asarray(self.rhs, dtype=float),
            np.asarray(self.lb, dtype=float),
            np.asarray(self.ub, dtype=float),
        )

    def objective_value(self, x: np.ndarray) -> float:
        return float(np.dot(self.obj, x) + self.obj_const)

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """Per-row violation (nonnegative) of x."""
        out = np.zeros(self.num_rows)
        for i, row in enumerate(self.rows):
            lhs = sum(a * x[j] for j, a in row.items())
            s, b = self.row_senses[i], self.rhs[i]
            if s == "<=":
                out[i] = max(0.0, lhs - b)
            elif s == ">=":
                out[i] = max(0.0, b - lhs)
            else:
                out[i] = abs(lhs - b)
        return out

    def bound_violation(self, x: np.ndarray) -> float:
        lo = np.asarray(self.lb) - x
        hi = x - np.asarray(self.ub)
        return float(max(0.0, lo.max(initial=0.0), hi.max(initial=0.0)))

    def copy(self) -> "LinearProgram":
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(
            {k: (v.copy() if isinstance(v, (list, dict, set)) else v) for k, v in self.__dict__.items()}
        )
        other.rows = [dict(r) for r in self.rows]
        return other


@dataclass
class ComplementarityPair:
    """At most one of two nonnegative variables may be positive."""

    first: int
    second: int
    name: str = ""
    big_m: tuple[float, float] | None = None


class MixedIntegerProgram(LinearProgram):
    """A linear program plus binaries and complementarity pairs."""

    def __init__(self, name: str = "milp", sense: str = "min"):
        super().__init__(name, sense)
        self.integers: set[int] = set()
        self.pairs: list[ComplementarityPair] = []

    def add_binary(self, name: str, obj: float = 0.0) -> int:
        j = self.add_var(name, 0.0, 1.0, obj)
        self.integers.add(j)
        return j

    def add_pair(
        self, first: int, second: int, name: str = "", big_m: tuple[float, float] | None = None
    ) -> int:
        for j in (first, second):
            if self.lb[j] < 0:
                raise ValidationError(
                    f"complementarity pair {name!r}: variable {self.var_names[j]!r} may be negative"
                )
        if big_m is not None and (big_m[0] <= 0 or big_m[1] <= 0):
            raise ValidationError(f"complementarity pair {name!r}: big-M values must be positive")
        self.pairs.append(ComplementarityPair(first, second, name, big_m))
        return len(self.pairs) - 1

    def validate_big_m(self) -> None:
        for p in self.pairs:
            if p.big_m is None:
                continue
            for j, m in zip((p.first, p.second), p.big_m):
                if np.isfinite(self.ub[j]) and self.ub[j] > m + 1e-9:
                    raise ValidationError(
                        f"pair {p.name!r}: big-M {m} below the bound {self.ub[j]} of {self.var_names[j]!r}"
                    )


class QuadraticProgram(LinearProgram):
    """LP data plus an objective term sum_k w_k * (a_k . x - t_k)^2.

    The quadratic part is stored as a list of squared affine forms so it is
    positive semidefinite by construction.
    """

    def __init__(self, name: str = "qp", sense: str = "min"):
        if sense != "min":
            raise ValidationError("quadratic programs are minimized")
        super().__init__(name, sense)
        self.squares: list[tuple[dict[int, float], float, float]] = []

    def add_square(self, coeffs: Mapping[int, float], target: float = 0.0, weight: float = 1.0) -> None:
        if weight < 0:
            raise ValidationError("squared terms need a nonnegative weight")
        self.squares.append(({int(j): float(a) for j, a in coeffs.items()}, float(target), float(weight)))

    def hessian_terms(self):
        """Return (Q, q, const) with objective 0.5 x'Qx + q'x + const (linear part included)."""
        n = self.num_vars
        Q = np.zeros((n, n))
        q = np.asarray(self.obj, dtype=float).copy()
        const = self.obj_const
        for coeffs, t, w in self.squares:
            a = np.zeros(n)
            for j, v in coeffs.items():
                a[j] = v
            Q += 2.0 * w * np.outer(a, a)
            q += -2.0 * w * t * a
            const += w * t * t
        return Q, q, const


@dataclass
class Solution:
    status: str  # optimal | infeasible | unbounded | limit
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = float("nan")
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reduced_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    var_names: list[str] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    iterations: int = 0
    nodes: int = 0
    gap: float = 0.0
    bound: float = float("nan")
    basis: object = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def value(self, name: str) -> float:
        if getattr(self, "_vpos", None) is None or len(self._vpos) != len(self.var_names):
            self._vpos = {n: j for j, n in enumerate(self.var_names)}
        return float(self.x[self._vpos[name]])

    def values(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.var_names, self.x)}

    def dual(self, name: str) -> float:
        if getattr(self, "_rpos", None) is None or len(self._rpos) != len(self.row_names):
            self._rpos = {n: i for i, n in enumerate(self.row_names)}
        return float(self.duals[self._rpos[name]])


def linear(terms: Iterable[tuple[int, float]]) -> dict[int, float]:
    """Sum (index, coefficient) pairs into a coefficient map."""
    out: dict[int, float] = {}
    for j, a in terms:
        out[j] = out.get(j, 0.0) + a
    return out

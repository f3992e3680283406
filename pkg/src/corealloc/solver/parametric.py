"""LPs whose bounds and right-hand sides are affine in named parameters.

A stage model is written once as a :class:`ParametricLP`.  It can then be
instantiated with numeric parameter values, or embedded into a larger program
where the parameters are variables of that program.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

from .model import INF, LinearProgram, ValidationError

Number = Union[int, float]


class Affine:
    """const + sum coef * param."""

    __slots__ = ("const", "terms")

    def __init__(self, const: float = 0.0, terms: Mapping[str, float] | None = None):
        self.const = float(const)
        self.terms: dict[str, float] = dict(terms or {})

    @classmethod
    def param(cls, name: str, coef: float = 1.0) -> "Affine":
        return cls(0.0, {name: coef})

    @classmethod
    def of(cls, value: "Affine | Number") -> "Affine":
        return value if isinstance(value, Affine) else cls(float(value))

    @property
    def is_constant(self) -> bool:
        return not any(self.terms.values())

    def __add__(self, other):
        o = Affine.of(other)
        t = dict(self.terms)
        for k, v in o.terms.items():
            t[k] = t.get(k, 0.0) + v
        return Affine(self.const + o.const, t)

    __radd__ = __add__

    def __neg__(self):
        return Affine(-self.const, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other):
        return self + (-Affine.of(other))

    def __rsub__(self, other):
        return Affine.of(other) - self

    def __mul__(self, s: Number):
        return Affine(self.const * s, {k: v * s for k, v in self.terms.items()})

    __rmul__ = __mul__

    def evaluate(self, env: Mapping[str, float]) -> float:
        return self.const + sum(v * float(env[k]) for k, v in self.terms.items() if v)

    def __repr__(self) -> str:
        parts = [f"{self.const:g}"] + [f"{v:+g}*{k}" for k, v in self.terms.items()]
        return "Affine(" + " ".join(parts) + ")"


Bound = Union[Affine, Number]


@dataclass
class PVar:
    name: str
    lb: Bound
    ub: Bound
    obj: float
    lb_symbol: str = ""
    ub_symbol: str = ""


@dataclass
class PRow:
    name: str
    coeffs: dict[str, float]
    sense: str
    rhs: Affine
    symbol: str = ""


@dataclass
class ParametricLP:
    """min sum obj*x subject to rows and bounds that may depend on parameters."""

    name: str = "stage"
    vars: list[PVar] = field(default_factory=list)
    rows: list[PRow] = field(default_factory=list)
    obj_const: float = 0.0
    _names: dict[str, int] = field(default_factory=dict)

    def add_var(self, name, lb: Bound = 0.0, ub: Bound = INF, obj: float = 0.0, lb_symbol="", ub_symbol=""):
        if name in self._names:
            raise ValidationError(f"duplicate variable {name!r} in {self.name}")
        self._names[name] = len(self.vars)
        self.vars.append(PVar(name, lb, ub, float(obj), lb_symbol, ub_symbol))
        return name

    def add_row(self, name, coeffs: Mapping[str, float], sense: str, rhs: Bound, symbol: str = ""):
        for k in coeffs:
            if k not in self._names:
                raise ValidationError(f"row {name!r} references unknown variable {k!r}")
        self.rows.append(PRow(name, dict(coeffs), sense, Affine.of(rhs), symbol))
        return name

    def var_index(self, name: str) -> int:
        return self._names[name]

    @property
    def parameters(self) -> set[str]:
        out: set[str] = set()
        for v in self.vars:
            for b in (v.lb, v.ub):
                if isinstance(b, Affine):
                    out.update(b.terms)
        for r in self.rows:
            out.update(r.rhs.terms)
        return out

    # numeric instantiation ---------------------------------------------
    def instantiate(self, env: Mapping[str, float]) -> LinearProgram:
        lp = LinearProgram(self.name)
        for v in self.vars:
            lo = _eval(v.lb, env)
            hi = _eval(v.ub, env)
            if lo > hi:
                # keep the model well formed; the empty box is reported as infeasible
                lp.add_var(v.name, lo, lo, v.obj)
                lp.add_constraint({lp.var(v.name): 1.0}, "<=", hi, f"empty_box[{v.name}]")
            else:
                lp.add_var(v.name, lo, hi, v.obj)
        for r in self.rows:
            lp.add_constraint({lp.var(k): a for k, a in r.coeffs.items()}, r.sense, r.rhs.evaluate(env), r.name)
        lp.obj_const = self.obj_const
        return lp

    # embedding -----------------------------------------------------------
    def embed_primal(
        self,
        mip: LinearProgram,
        env: Mapping[str, int],
        prefix: str = "",
        obj_weight: float = 0.0,
        static_bounds: Mapping[str, tuple[float, float]] | None = None,
        fixed: Mapping[str, float] | None = None,
    ) -> dict[str, int]:
        """Add the stage's variables and constraints to ``mip``.

        ``env`` maps parameter names to variable indices of ``mip``; ``fixed``
        gives numeric values for the remaining parameters.  Parametric bounds
        become explicit rows.  Returns stage variable name -> ``mip`` index.
        """
        fixed = fixed or {}
        idx: dict[str, int] = {}
        static_bounds = static_bounds or {}
        for v in self.vars:
            lo_c, lo_p = _split(v.lb, env, fixed)
            hi_c, hi_p = _split(v.ub, env, fixed)
            slo, shi = static_bounds.get(v.name, (-INF, INF))
            lo = lo_c if not lo_p else slo
            hi = hi_c if not hi_p else shi
            idx[v.name] = mip.add_var(prefix + v.name, lo, hi, obj_weight * v.obj)
            if lo_p:
                mip.add_constraint(_row(idx[v.name], 1.0, lo_p), ">=", lo_c, f"{prefix}lb[{v.name}]")
            if hi_p:
                mip.add_constraint(_row(idx[v.name], 1.0, hi_p), "<=", hi_c, f"{prefix}ub[{v.name}]")
        for r in self.rows:
            const, par = _split(r.rhs, env, fixed)
            coeffs = {idx[k]: a for k, a in r.coeffs.items()}
            for j, a in par.items():
                coeffs[j] = coeffs.get(j, 0.0) - a
            mip.add_constraint(coeffs, r.sense, const, prefix + r.name)
        return idx


def _eval(b: Bound, env: Mapping[str, float]) -> float:
    if isinstance(b, Affine):
        return b.evaluate(env)
    return float(b)


def _split(
    b: Bound, env: Mapping[str, int], fixed: Mapping[str, float]
) -> tuple[float, dict[int, float]]:
    """Split a bound into its numeric part and its variable part (by mip index)."""
    if not isinstance(b, Affine):
        return float(b), {}
    const = b.const
    par: dict[int, float] = {}
    for k, v in b.terms.items():
        if not v:
            continue
        if k in env:
            j = int(env[k])
            par[j] = par.get(j, 0.0) + v
        elif k in fixed:
            const += v * float(fixed[k])
        else:
            raise ValidationError(f"parameter {k!r} is neither a variable nor fixed")
    return const, par


def _row(j: int, a: float, par: Mapping[int, float]) -> dict[int, float]:
    row = {j: a}
    for k, v in par.items():
        row[k] = row.get(k, 0.0) - v
    return row


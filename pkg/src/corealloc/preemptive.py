"""Coalition-dependent preemptive allocation of tie-line capacity to reserves.

The leader chooses link shares chi' on links inside the coalition.  The
reserve and day-ahead floors react as lower-level LPs, replaced here by their
KKT systems; balancing for every scenario stays in the upper level.  The
resulting single-level program is a MILP with complementarity pairs.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .markets.clearing import (
    ClearingOutcome,
    InfeasibleStage,
    balancing_model,
    chi_name,
    clear_balancing,
    clear_day_ahead,
    clear_reserve,
    coalition_links,
    day_ahead_model,
    frozen_links,
    reserve_model,
    reserve_providers,
    run_sequential,
    BalancingResult,
    DayAheadResult,
    ReserveResult,
)
from .markets.system import SystemData
from .solver import INF, MixedIntegerProgram, SolverOptions, solve_milp
from .solver.parametric import Affine, ParametricLP, _split

DEFAULT_BIG_M = 1e4


# ---------------------------------------------------------------------------
# KKT embedding of a parametric LP


@dataclass
class KktSystem:
    """Index bookkeeping for one embedded lower level."""

    stage: str
    primal: dict[str, int]
    duals: dict[str, int]  # multiplier symbol -> variable index
    stationarity: dict[str, int]  # primal variable -> row index
    pairs: list[int]  # indices into mip.pairs
    pair_kinds: dict[str, int] = field(default_factory=dict)
    objective: dict[int, float] = field(default_factory=dict)

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)


def _interval(coeffs: Mapping[int, float], lo: np.ndarray, hi: np.ndarray) -> tuple[float, float]:
    a, b = 0.0, 0.0
    for j, c in coeffs.items():
        if c >= 0:
            a += c * lo[j]
            b += c * hi[j]
        else:
            a += c * hi[j]
            b += c * lo[j]
    return a, b


def build_kkt(
    plp: ParametricLP,
    mip: MixedIntegerProgram,
    env: Mapping[str, int],
    fixed: Mapping[str, float] | None = None,
    prefix: str = "",
    static_bounds: Mapping[str, tuple[float, float]] | None = None,
    dual_bound: float = DEFAULT_BIG_M,
) -> KktSystem:
    """Add primal feasibility, stationarity and complementarity of ``plp`` to ``mip``.

    With the Lagrangian c'x - mu'(Gx - h) - lam'(Ex - e) - muL'(x - l) - muU'(u - x),
    stationarity reads c - G'mu - E'lam - muL + muU = 0 and every inequality
    slack is paired with its multiplier.  A zero lower bound is kept as a
    sign restriction, so its multiplier pairs with the variable itself.
    """
    fixed = fixed or {}
    static_bounds = static_bounds or {}
    primal: dict[str, int] = {}
    duals: dict[str, int] = {}
    kinds: dict[str, int] = {}
    pairs: list[int] = []
    # stationarity coefficients: var name -> {mip index: coef}
    stat: dict[str, dict[int, float]] = {v.name: {} for v in plp.vars}
    objective: dict[int, float] = {}

    def pair(s: int, mu: int, kind: str, name: str):
        ms = mip.ub[s] if np.isfinite(mip.ub[s]) else DEFAULT_BIG_M
        pairs.append(mip.add_pair(s, mu, name, (max(ms, 1e-6), dual_bound)))
        kinds[kind] = kinds.get(kind, 0) + 1

    for v in plp.vars:
        lo_c, lo_p = _split(v.lb, env, fixed)
        hi_c, hi_p = _split(v.ub, env, fixed)
        slo, shi = static_bounds.get(v.name, (-INF, INF))
        lo = lo_c if not lo_p else slo
        hi = hi_c if not hi_p else shi
        j = mip.add_var(prefix + v.name, lo, hi)
        primal[v.name] = j
        objective[j] = v.obj

    lo_arr = np.asarray(mip.lb, dtype=float)
    hi_arr = np.asarray(mip.ub, dtype=float)

    for v in plp.vars:
        j = primal[v.name]
        lo_c, lo_p = _split(v.lb, env, fixed)
        hi_c, hi_p = _split(v.ub, env, fixed)
        # lower bound
        if lo_p or np.isfinite(lo_c):
            sym = v.lb_symbol or f"muL[{v.name}]"
            mu = mip.add_var(prefix + sym, 0.0, INF)
            duals[sym] = mu
            stat[v.name][mu] = stat[v.name].get(mu, 0.0) - 1.0
            if not lo_p and lo_c == 0.0:
                pair(j, mu, "sign", f"{prefix}sign[{v.name}]")
            else:
                span = _slack_span(hi_arr[j], lo_c, lo_p, lo_arr, hi_arr, lower=True)
                s = mip.add_var(f"{prefix}sL[{v.name}]", 0.0, span)
                row = {j: 1.0, s: -1.0}
                for k, a in lo_p.items():
                    row[k] = row.get(k, 0.0) - a
                mip.add_constraint(row, "=", lo_c, f"{prefix}defL[{v.name}]")
                pair(s, mu, "bound", f"{prefix}lb[{v.name}]")
        if hi_p or np.isfinite(hi_c):
            sym = v.ub_symbol or f"muU[{v.name}]"
            mu = mip.add_var(prefix + sym, 0.0, INF)
            duals[sym] = mu
            stat[v.name][mu] = stat[v.name].get(mu, 0.0) + 1.0
            span = _slack_span(lo_arr[j], hi_c, hi_p, lo_arr, hi_arr, lower=False)
            s = mip.add_var(f"{prefix}sU[{v.name}]", 0.0, span)
            row = {j: 1.0, s: 1.0}
            for k, a in hi_p.items():
                row[k] = row.get(k, 0.0) - a
            mip.add_constraint(row, "=", hi_c, f"{prefix}defU[{v.name}]")
            pair(s, mu, "bound", f"{prefix}ub[{v.name}]")

    for r in plp.rows:
        const, par = _split(r.rhs, env, fixed)
        coeffs = {primal[k]: a for k, a in r.coeffs.items()}
        sym = r.symbol or f"mu[{r.name}]"
        if r.sense == "=":
            lam = mip.add_var(prefix + sym, -INF, INF)
            duals[sym] = lam
            row = dict(coeffs)
            for k, a in par.items():
                row[k] = row.get(k, 0.0) - a
            mip.add_constraint(row, "=", const, prefix + r.name)
            for name, a in r.coeffs.items():
                stat[name][lam] = stat[name].get(lam, 0.0) - a
            continue
        mu = mip.add_var(prefix + sym, 0.0, INF)
        duals[sym] = mu
        sgn = 1.0 if r.sense == ">=" else -1.0
        lhs_lo, lhs_hi = _interval(coeffs, lo_arr, hi_arr)
        par_lo, par_hi = _interval(par, lo_arr, hi_arr)
        span = (lhs_hi - const - par_lo) if sgn > 0 else (const + par_hi - lhs_lo)
        span = span if np.isfinite(span) and span > 0 else DEFAULT_BIG_M
        s = mip.add_var(f"{prefix}s[{r.name}]", 0.0, span)
        # sgn * (G x - h) - s = 0
        row = {k: sgn * a for k, a in coeffs.items()}
        for k, a in par.items():
            row[k] = row.get(k, 0.0) - sgn * a
        row[s] = row.get(s, 0.0) - 1.0
        mip.add_constraint(row, "=", sgn * const, prefix + r.name)
        pair(s, mu, "row", f"{prefix}cs[{r.name}]")
        for name, a in r.coeffs.items():
            stat[name][mu] = stat[name].get(mu, 0.0) - sgn * a

    stationarity: dict[str, int] = {}
    for v in plp.vars:
        stationarity[v.name] = mip.add_constraint(stat[v.name], "=", -v.obj, f"{prefix}stat[{v.name}]")
    return KktSystem(plp.name, primal, duals, stationarity, pairs, kinds, objective)


def _slack_span(other_bound, c, par, lo_arr, hi_arr, lower: bool) -> float:
    """Upper bound on x - l (lower) or u - x (upper) from static variable ranges."""
    p_lo, p_hi = _interval(par, lo_arr, hi_arr)
    if lower:
        span = other_bound - (c + p_lo)
    else:
        span = (c + p_hi) - other_bound
    return float(span) if np.isfinite(span) and span >= 0 else INF


# ---------------------------------------------------------------------------
# preemptive model


@dataclass
class PreemptiveInstance:
    sys: SystemData
    coalition: tuple[int, ...]
    baseline: np.ndarray

    @classmethod
    def make(cls, sys: SystemData, coalition: Iterable[int] = (), baseline: Sequence[float] | None = None):
        base = np.zeros(len(sys.links)) if baseline is None else np.asarray(baseline, float)
        return cls(sys, tuple(sorted(set(coalition))), base)

    @property
    def free_links(self) -> list[int]:
        """Links inside the coalition, whose share the leader may choose."""
        if len(self.coalition) == 0:
            return []
        return coalition_links(self.sys, self.coalition)

    @property
    def frozen(self) -> list[int]:
        return frozen_links(self.sys, self.baseline, self.coalition)


@dataclass
class PreemptiveModel:
    mip: MixedIntegerProgram
    chi: dict[int, int]
    reserve: KktSystem
    day_ahead: KktSystem
    balancing: list[dict[str, int]]
    cost_terms: dict[str, dict[int, float]]
    binaries: dict[int, int] = field(default_factory=dict)


def _static_bounds(sys: SystemData) -> dict[str, tuple[float, float]]:
    sb: dict[str, tuple[float, float]] = {}
    Te = sys.link_cap
    for e, name in enumerate(sys.links):
        sb[f"re_up[{name}]"] = (-Te[e], Te[e])
        sb[f"re_dn[{name}]"] = (-Te[e], Te[e])
    for i, g in enumerate(sys.gens):
        sb[f"p[{g}]"] = (0.0, float(sys.gen_cap[i]))
    for l, name in enumerate(sys.lines):
        T = float(sys.line_cap[l])
        sb[f"f[{name}]"] = (-T, T)
    return sb


def _dual_bound(sys: SystemData) -> float:
    offers = np.concatenate([sys.offer, sys.up_offer, sys.down_offer, [0.0]])
    return float(sys.shed_cost + np.abs(offers).max())


def _embed_lower_levels(sys: SystemData, mip: MixedIntegerProgram, chi_env: dict[str, int], chi_fixed: dict[str, float]):
    sb = _static_bounds(sys)
    M = _dual_bound(sys)
    res = build_kkt(reserve_model(sys), mip, chi_env, chi_fixed, "R.", sb, M)
    env = dict(chi_env)
    up, dn = reserve_providers(sys)
    for i in up:
        env[f"r_up[{sys.gens[i]}]"] = res.primal[f"r_up[{sys.gens[i]}]"]
    for i in dn:
        env[f"r_dn[{sys.gens[i]}]"] = res.primal[f"r_dn[{sys.gens[i]}]"]
    da = build_kkt(day_ahead_model(sys), mip, env, chi_fixed, "D.", sb, M)
    _reverse_pairs(mip, res)
    _reverse_pairs(mip, da)
    return res, da, env


def _reverse_pairs(mip: MixedIntegerProgram, kkt: KktSystem) -> None:
    # branching on the last declared pairs of a stage (line and bound limits)
    # first prunes the tree several times faster on the three-area data
    lo, hi = min(kkt.pairs), max(kkt.pairs) + 1
    mip.pairs[lo:hi] = mip.pairs[lo:hi][::-1]
    kkt.pairs[:] = [lo + hi - 1 - k for k in kkt.pairs]


def _balancing_env(sys: SystemData, res: KktSystem, da: KktSystem) -> dict[str, int]:
    env: dict[str, int] = {}
    up, dn = reserve_providers(sys)
    for i in up:
        env[f"r_up[{sys.gens[i]}]"] = res.primal[f"r_up[{sys.gens[i]}]"]
    for i in dn:
        env[f"r_dn[{sys.gens[i]}]"] = res.primal[f"r_dn[{sys.gens[i]}]"]
    for j in sys.winds:
        env[f"w[{j}]"] = da.primal[f"w[{j}]"]
    for l in sys.lines:
        env[f"f[{l}]"] = da.primal[f"f[{l}]"]
    return env


def build_preemptive(inst: PreemptiveInstance) -> PreemptiveModel:
    sys = inst.sys
    mip = MixedIntegerProgram(f"preemptive{list(inst.coalition)}")
    free = set(inst.free_links)
    chi_env: dict[str, int] = {}
    chi_fixed: dict[str, float] = {}
    chi_idx: dict[int, int] = {}
    for e in range(len(sys.links)):
        if e in free:
            chi_idx[e] = mip.add_var(chi_name(sys, e), 0.0, 1.0)
            chi_env[chi_name(sys, e)] = chi_idx[e]
        else:
            chi_fixed[chi_name(sys, e)] = float(inst.baseline[e])
    res, da, _ = _embed_lower_levels(sys, mip, chi_env, chi_fixed)
    benv = _balancing_env(sys, res, da)
    frozen = inst.frozen
    bal = []
    cost_terms = {"reserve": res.objective, "day_ahead": da.objective}
    for s in range(len(sys.scenarios)):
        plp = balancing_model(sys, s, frozen)
        idx = plp.embed_primal(mip, benv, "B.")
        bal.append(idx)
        cost_terms[f"balancing[{sys.scenarios[s]}]"] = {idx[v.name]: v.obj for v in plp.vars if v.obj}
    obj: dict[int, float] = {}
    for j, c in res.objective.items():
        obj[j] = obj.get(j, 0.0) + c
    for j, c in da.objective.items():
        obj[j] = obj.get(j, 0.0) + c
    for s in range(len(sys.scenarios)):
        for j, c in cost_terms[f"balancing[{sys.scenarios[s]}]"].items():
            obj[j] = obj.get(j, 0.0) + sys.prob[s] * c
    mip.set_objective(obj)
    return PreemptiveModel(mip, chi_idx, res, da, bal, cost_terms)


@dataclass
class PreemptiveResult:
    coalition: tuple[int, ...]
    J: float
    chi: np.ndarray
    stage_costs: dict[str, float]
    scenario_costs: np.ndarray
    gap: float
    nodes: int
    wall_time: float
    outcome: ClearingOutcome | None = None
    verified: bool = False
    solver: str = "builtin"

    def record(self) -> dict:
        return {
            "coalition": list(self.coalition),
            "J": self.J,
            "chi": [float(x) for x in self.chi],
            "stage_costs": self.stage_costs,
            "scenario_costs": [float(x) for x in self.scenario_costs],
            "gap": self.gap,
            "nodes": self.nodes,
            "wall_time": self.wall_time,
            "verified": self.verified,
            "solver": self.solver,
        }


class VerificationError(RuntimeError):
    """Re-clearing the markets at the MILP decisions disagrees with the MILP."""


def _stage_value(terms: Mapping[int, float], x: np.ndarray) -> float:
    return float(sum(c * x[j] for j, c in terms.items()))


def _run_milp(model: PreemptiveModel, opts: SolverOptions, solver: str):
    if solver == "builtin":
        return solve_milp(model.mip, opts)
    if solver == "bridge":
        from .solver.bridge import solve_external

        return solve_external(model.mip, opts)
    raise ValueError(f"unknown solver {solver!r}")


def solve_preemptive(
    inst: PreemptiveInstance,
    opts: SolverOptions | None = None,
    solver: str = "builtin",
    verify: bool = True,
    tol: float = 1e-5,
) -> PreemptiveResult:
    """Optimal shares and expected cost J(C) for one coalition."""
    sys = inst.sys
    t0 = time.perf_counter()
    if len(inst.free_links) == 0:
        # nothing to choose: existing arrangements
        out = run_sequential(sys, inst.baseline, inst.coalition, opts)
        costs = _outcome_costs(sys, out)
        return PreemptiveResult(
            inst.coalition, out.expected_cost, inst.baseline.copy(), costs, out.scenario_costs, 0.0, 0,
            time.perf_counter() - t0, out, True, "sequential",
        )
    model = build_preemptive(inst)
    sol = _run_milp(model, opts or SolverOptions(), solver)
    if not sol.ok:
        raise InfeasibleStage("preemptive", f"MILP status {sol.status}")
    x = sol.x
    chi = inst.baseline.copy()
    for e, j in model.chi.items():
        chi[e] = _clean_share(x[j])
    stage = {k: _stage_value(v, x) for k, v in model.cost_terms.items()}
    base = stage["reserve"] + stage["day_ahead"]
    scen = np.array([base + stage[f"balancing[{s}]"] for s in sys.scenarios])
    J = float(sys.prob @ scen)
    res = PreemptiveResult(inst.coalition, J, chi, stage, scen, sol.gap, sol.nodes, 0.0, solver=solver)
    if verify:
        res.outcome = verify_preemptive(inst, model, x, res, tol)
        res.verified = True
    res.wall_time = time.perf_counter() - t0
    return res


def _clean_share(v: float, tol: float = 1e-9) -> float:
    v = min(1.0, max(0.0, float(v)))
    return 0.0 if v < tol else 1.0 if v > 1.0 - tol else v


def _outcome_costs(sys: SystemData, out: ClearingOutcome) -> dict[str, float]:
    costs = {"reserve": out.reserve.cost, "day_ahead": out.day_ahead.cost}
    for b in out.balancing:
        costs[f"balancing[{b.scenario}]"] = b.cost
    return costs


def embedded_decisions(sys: SystemData, model: PreemptiveModel, x: np.ndarray):
    """Reserve and day-ahead quantities read from a MILP solution."""
    rp = model.reserve.primal
    dp = model.day_ahead.primal
    r_up = np.array([x[rp[f"r_up[{g}]"]] if f"r_up[{g}]" in rp else 0.0 for g in sys.gens])
    r_dn = np.array([x[rp[f"r_dn[{g}]"]] if f"r_dn[{g}]" in rp else 0.0 for g in sys.gens])
    re_up = np.array([x[rp[f"re_up[{e}]"]] for e in sys.links])
    re_dn = np.array([x[rp[f"re_dn[{e}]"]] for e in sys.links])
    p = np.array([x[dp[f"p[{g}]"]] for g in sys.gens])
    w = np.array([x[dp[f"w[{j}]"]] for j in sys.winds])
    f = np.array([x[dp[f"f[{l}]"]] for l in sys.lines])
    delta = np.array([x[dp[f"delta[{n}]"]] for n in sys.nodes])
    return r_up, r_dn, re_up, re_dn, p, w, f, delta


def verify_preemptive(
    inst: PreemptiveInstance, model: PreemptiveModel, x: np.ndarray, res: PreemptiveResult, tol: float = 1e-5
) -> ClearingOutcome:
    """Re-clear all floors at the MILP shares and compare costs.

    Reserve and day-ahead costs must equal the direct LP optima at chi-hat;
    balancing is re-cleared at the MILP's reserve and day-ahead quantities.
    """
    sys = inst.sys
    chi = res.chi
    scale = lambda v: tol * (1.0 + abs(v))  # noqa: E731
    r = clear_reserve(sys, chi)
    if abs(r.cost - res.stage_costs["reserve"]) > scale(r.cost):
        raise VerificationError(f"reserve cost {res.stage_costs['reserve']} differs from re-clearing {r.cost}")
    r_up, r_dn, re_up, re_dn, p, w, f, delta = embedded_decisions(sys, model, x)
    r_emb = ReserveResult(r_up, r_dn, re_up, re_dn, r.price_up, r.price_dn, res.stage_costs["reserve"])
    d = clear_day_ahead(sys, chi, r_emb)
    if abs(d.cost - res.stage_costs["day_ahead"]) > scale(d.cost):
        raise VerificationError(f"day-ahead cost {res.stage_costs['day_ahead']} differs from re-clearing {d.cost}")
    d_emb = DayAheadResult(p, w, f, delta, d.price, res.stage_costs["day_ahead"], d.flow_rc)
    bal: list[BalancingResult] = []
    for s in range(len(sys.scenarios)):
        b = clear_balancing(sys, inst.baseline, d_emb, r_emb, s, inst.coalition)
        key = f"balancing[{sys.scenarios[s]}]"
        if abs(b.cost - res.stage_costs[key]) > scale(b.cost):
            raise VerificationError(f"{key} cost {res.stage_costs[key]} differs from re-clearing {b.cost}")
        bal.append(b)
    return ClearingOutcome(chi, inst.coalition, r_emb, d_emb, bal, sys.prob.copy(), inst.frozen)


# ---------------------------------------------------------------------------
# benefit-aware violation problem


@dataclass
class ViolationResult:
    cost: float
    coalition: tuple[int, ...]
    J: float
    value: float  # J(empty) - J(C)
    chi: np.ndarray
    nodes: int


def build_violation(sys: SystemData, beta: Sequence[float], baseline: Sequence[float] | None = None) -> PreemptiveModel:
    """One MILP choosing the coalition that minimizes J(C) + sum of its fees beta."""
    base = np.zeros(len(sys.links)) if baseline is None else np.asarray(baseline, float)
    mip = MixedIntegerProgram("violation")
    b = {a: mip.add_binary(f"b[{area}]") for a, area in enumerate(sys.areas)}
    chi_idx: dict[int, int] = {}
    chi_env: dict[str, int] = {}
    for e in range(len(sys.links)):
        j = mip.add_var(chi_name(sys, e), 0.0, 1.0)
        chi_idx[e] = j
        chi_env[chi_name(sys, e)] = j
        for a in np.flatnonzero(sys.H[e] != 0):
            # chi' equals the baseline unless area a participates
            mip.add_constraint({j: 1.0, b[a]: base[e]}, ">=", base[e], f"gate_lo[{sys.links[e]},{sys.areas[a]}]")
            mip.add_constraint({j: 1.0, b[a]: base[e] - 1.0}, "<=", base[e], f"gate_hi[{sys.links[e]},{sys.areas[a]}]")
    res, da, _ = _embed_lower_levels(sys, mip, chi_env, {})
    benv = _balancing_env(sys, res, da)
    bal = []
    cost_terms = {"reserve": res.objective, "day_ahead": da.objective}
    for s in range(len(sys.scenarios)):
        plp = balancing_model(sys, s, ())
        idx = plp.embed_primal(mip, benv, "B.")
        bal.append(idx)
        cost_terms[f"balancing[{sys.scenarios[s]}]"] = {idx[v.name]: v.obj for v in plp.vars if v.obj}
        sfx = f"_{sys.scenarios[s]}"
        for e in range(len(sys.links)):
            if base[e] != 0:
                continue
            for l in sys.link_lines[e]:
                fl, fs = da.primal[f"f[{sys.lines[l]}]"], idx[f"f{sfx}[{sys.lines[l]}]"]
                M = 2.0 * float(sys.line_cap[l])
                for a in np.flatnonzero(sys.H[e] != 0):
                    mip.add_constraint({fs: 1.0, fl: -1.0, b[a]: -M}, "<=", 0.0, f"freeze_hi{sfx}[{sys.lines[l]},{a}]")
                    mip.add_constraint({fs: 1.0, fl: -1.0, b[a]: M}, ">=", 0.0, f"freeze_lo{sfx}[{sys.lines[l]},{a}]")
    obj: dict[int, float] = {}
    for terms, w in [(res.objective, 1.0), (da.objective, 1.0)] + [
        (cost_terms[f"balancing[{s}]"], sys.prob[k]) for k, s in enumerate(sys.scenarios)
    ]:
        for j, c in terms.items():
            obj[j] = obj.get(j, 0.0) + w * c
    for a, j in b.items():
        obj[j] = obj.get(j, 0.0) + float(beta[a])
    mip.set_objective(obj)
    return PreemptiveModel(mip, chi_idx, res, da, bal, cost_terms, b)


def solve_violation(
    sys: SystemData,
    beta: Sequence[float],
    J_empty: float,
    baseline: Sequence[float] | None = None,
    opts: SolverOptions | None = None,
    solver: str = "builtin",
) -> ViolationResult:
    model = build_violation(sys, beta, baseline)
    sol = _run_milp(model, opts or SolverOptions(), solver)
    if not sol.ok:
        raise InfeasibleStage("violation", f"MILP status {sol.status}")
    x = sol.x
    coalition = tuple(a for a, j in model.binaries.items() if x[j] > 0.5)
    fees = float(sum(beta[a] for a in coalition))
    J = sol.objective - fees
    chi = np.array([_clean_share(x[model.chi[e]]) for e in range(len(sys.links))])
    return ViolationResult(sol.objective, coalition, J, J_empty - J, chi, sol.nodes)


# ---------------------------------------------------------------------------
# results ledger


def system_digest(sys: SystemData) -> str:
    h = hashlib.sha256()
    for k, v in sorted(vars(sys).items()):
        if k == "meta":
            continue
        if isinstance(v, np.ndarray):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype=float).tobytes())
        else:
            h.update(f"{k}={v!r}".encode())
    return h.hexdigest()[:16]


class ResultsLedger:
    """Per-coalition results kept on disk so repeated runs skip the MILP."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: dict[str, dict] = {}
        self.solves = 0
        if self.path is not None and self.path.exists():
            self.records = json.loads(self.path.read_text())

    @staticmethod
    def key(sys: SystemData, coalition: Iterable[int], baseline: Sequence[float]) -> str:
        base = ",".join(f"{x:.12g}" for x in baseline)
        return f"{system_digest(sys)}|{','.join(map(str, sorted(coalition)))}|{base}"

    def get(self, sys, coalition, baseline) -> dict | None:
        return self.records.get(self.key(sys, coalition, baseline))

    def put(self, sys, coalition, baseline, record: dict):
        self.records[self.key(sys, coalition, baseline)] = record
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.records, indent=1, sort_keys=True))

    def solve(self, inst: PreemptiveInstance, opts=None, solver="builtin") -> dict:
        rec = self.get(inst.sys, inst.coalition, inst.baseline)
        if rec is not None:
            return rec
        self.solves += 1
        res = solve_preemptive(inst, opts, solver)
        rec = res.record()
        rec["mask"] = sum(1 << a for a in inst.coalition)
        self.put(inst.sys, inst.coalition, inst.baseline, rec)
        return rec

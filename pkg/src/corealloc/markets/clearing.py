"""Reserve, day-ahead and balancing market models and their sequential clearing.

Each floor is written as a :class:`ParametricLP` whose parameters are the
upstream decisions: link shares ``chi[e]`` for the reserve and day-ahead
floors, reserve awards ``r_up[i]``/``r_dn[i]`` for the day-ahead and balancing
floors, and day-ahead wind ``w[j]`` and flows ``f[l]`` for balancing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..solver import Affine, ParametricLP, SolverOptions, solve_lp
from .system import SystemData

INF = float("inf")


class InfeasibleStage(RuntimeError):
    """A market floor has no feasible clearing."""

    def __init__(self, stage: str, detail: str = ""):
        super().__init__(f"{stage} market infeasible" + (f": {detail}" if detail else ""))
        self.stage = stage
        self.detail = detail


# naming helpers ------------------------------------------------------------------


def chi_name(sys: SystemData, e: int) -> str:
    return f"chi[{sys.links[e]}]"


def reserve_providers(sys: SystemData) -> tuple[np.ndarray, np.ndarray]:
    return np.flatnonzero(sys.up_cap > 0), np.flatnonzero(sys.down_cap > 0)


def line_shares(sys: SystemData, chi: Sequence[float]) -> np.ndarray:
    """chi per line: the link value on tie-lines, zero on intra-area lines."""
    ll = sys.line_link
    return np.array([chi[e] if e >= 0 else 0.0 for e in ll])


def frozen_links(sys: SystemData, chi: Sequence[float], coalition: Iterable[int]) -> list[int]:
    """Links with no reserve share that touch an area outside the coalition."""
    inside = set(coalition)
    out = []
    for e in range(len(sys.links)):
        if chi[e] == 0 and any(sys.H[e, a] != 0 for a in range(len(sys.areas)) if a not in inside):
            out.append(e)
    return out


def coalition_links(sys: SystemData, coalition: Iterable[int]) -> list[int]:
    """Links whose both ends lie inside the coalition."""
    inside = set(coalition)
    return [
        e for e in range(len(sys.links)) if all(sys.H[e, a] == 0 for a in range(len(sys.areas)) if a not in inside)
    ]


# stage models ----------------------------------------------------------------------


def reserve_model(sys: SystemData) -> ParametricLP:
    m = ParametricLP("reserve")
    up, dn = reserve_providers(sys)
    for i in up:
        m.add_var(f"r_up[{sys.gens[i]}]", 0.0, float(sys.up_cap[i]), sys.up_offer[i], ub_symbol=f"mu_R_up[{sys.gens[i]}]")
    for i in dn:
        m.add_var(f"r_dn[{sys.gens[i]}]", 0.0, float(sys.down_cap[i]), sys.down_offer[i], ub_symbol=f"mu_R_dn[{sys.gens[i]}]")
    Te = sys.link_cap
    for e, name in enumerate(sys.links):
        for d in ("up", "dn"):
            bound = Affine.param(chi_name(sys, e), float(Te[e]))
            m.add_var(
                f"re_{d}[{name}]", -bound, bound, 0.0, lb_symbol=f"zeta_L_{d}[{name}]", ub_symbol=f"zeta_U_{d}[{name}]"
            )
    ga = sys.gen_area
    for a, area in enumerate(sys.areas):
        for d, prov, req in (("up", up, sys.req_up), ("dn", dn, sys.req_down)):
            row = {f"r_{d}[{sys.gens[i]}]": 1.0 for i in prov if ga[i] == a}
            for e in range(len(sys.links)):
                if sys.H[e, a] != 0:
                    row[f"re_{d}[{sys.links[e]}]"] = float(sys.H[e, a])
            m.add_row(f"req_{d}[{area}]", row, ">=", float(req[a]), symbol=f"mu_RR_{d}[{area}]")
    return m


def day_ahead_model(sys: SystemData) -> ParametricLP:
    m = ParametricLP("day_ahead")
    up, dn = reserve_providers(sys)
    for i, g in enumerate(sys.gens):
        lo = Affine.param(f"r_dn[{g}]") if i in dn else 0.0
        hi = Affine(float(sys.gen_cap[i])) - (Affine.param(f"r_up[{g}]") if i in up else 0.0)
        m.add_var(f"p[{g}]", lo, hi, sys.offer[i], lb_symbol=f"mu_PL[{g}]", ub_symbol=f"mu_PU[{g}]")
    for j, w in enumerate(sys.winds):
        m.add_var(f"w[{w}]", 0.0, float(sys.wind_expected[j]), sys.wind_offer[j], ub_symbol=f"mu_WU[{w}]")
    ll = sys.line_link
    for l, name in enumerate(sys.lines):
        T = float(sys.line_cap[l])
        cap = Affine(T) - (Affine.param(chi_name(sys, ll[l]), T) if ll[l] >= 0 else 0.0)
        m.add_var(f"f[{name}]", -cap, cap, 0.0, lb_symbol=f"zeta_L[{name}]", ub_symbol=f"zeta_U[{name}]")
    for n in sys.nodes:
        m.add_var(f"delta[{n}]", -INF, INF, 0.0)
    _balance_da(m, sys)
    _network_rows(m, sys, "")
    return m


def _network_rows(m: ParametricLP, sys: SystemData, suffix: str):
    """Flow definition rows and the reference angle."""
    for l, name in enumerate(sys.lines):
        a, b = sys.nodes[sys.line_from[l]], sys.nodes[sys.line_to[l]]
        B = float(sys.susceptance[l])
        m.add_row(
            f"flow{suffix}[{name}]",
            {f"f{suffix}[{name}]": 1.0, f"delta{suffix}[{a}]": -B, f"delta{suffix}[{b}]": B},
            "=",
            0.0,
            symbol=f"lam_F{suffix}[{name}]",
        )
    m.add_row(f"ref{suffix}", {f"delta{suffix}[{sys.nodes[0]}]": 1.0}, "=", 0.0, symbol=f"lam_REF{suffix}")


def _balance_da(m: ParametricLP, sys: SystemData):
    A = sys.incidence
    for n, node in enumerate(sys.nodes):
        row: dict[str, float] = {}
        for i in np.flatnonzero(sys.gen_node == n):
            row[f"p[{sys.gens[i]}]"] = 1.0
        for j in np.flatnonzero(sys.wind_node == n):
            row[f"w[{sys.winds[j]}]"] = 1.0
        for l in np.flatnonzero(A[:, n]):
            row[f"f[{sys.lines[l]}]"] = -A[l, n]
        m.add_row(f"bal[{node}]", row, "=", float(sys.demand[n]), symbol=f"lam[{node}]")


def balancing_model(sys: SystemData, s: int, frozen: Sequence[int] = ()) -> ParametricLP:
    """Balancing floor for scenario ``s``; flows on ``frozen`` links keep day-ahead values."""
    sfx = f"_{sys.scenarios[s]}"
    m = ParametricLP(f"balancing{sfx}")
    up, dn = reserve_providers(sys)
    for i in up:
        g = sys.gens[i]
        m.add_var(f"p_up{sfx}[{g}]", 0.0, Affine.param(f"r_up[{g}]"), sys.offer[i])
    for i in dn:
        g = sys.gens[i]
        m.add_var(f"p_dn{sfx}[{g}]", 0.0, Affine.param(f"r_dn[{g}]"), -sys.offer[i])
    for n, node in enumerate(sys.nodes):
        if sys.demand[n] > 0:
            m.add_var(f"shed{sfx}[{node}]", 0.0, float(sys.demand[n]), sys.shed_cost)
    for j, w in enumerate(sys.winds):
        m.add_var(f"spill{sfx}[{w}]", 0.0, float(sys.wind_scen[s, j]), 0.0)
    frozen_mask = sys.link_lines_mask(frozen)
    for l, name in enumerate(sys.lines):
        if frozen_mask[l]:
            fl = Affine.param(f"f[{name}]")
            m.add_var(f"f{sfx}[{name}]", fl, fl, 0.0)
        else:
            T = float(sys.line_cap[l])
            m.add_var(f"f{sfx}[{name}]", -T, T, 0.0)
    for n in sys.nodes:
        m.add_var(f"delta{sfx}[{n}]", -INF, INF, 0.0)
    A = sys.incidence
    for n, node in enumerate(sys.nodes):
        row: dict[str, float] = {}
        rhs = Affine(0.0)
        for i in np.flatnonzero(sys.gen_node == n):
            if i in up:
                row[f"p_up{sfx}[{sys.gens[i]}]"] = 1.0
            if i in dn:
                row[f"p_dn{sfx}[{sys.gens[i]}]"] = -1.0
        if sys.demand[n] > 0:
            row[f"shed{sfx}[{node}]"] = 1.0
        for j in np.flatnonzero(sys.wind_node == n):
            row[f"spill{sfx}[{sys.winds[j]}]"] = -1.0
            rhs = rhs - float(sys.wind_scen[s, j]) + Affine.param(f"w[{sys.winds[j]}]")
        for l in np.flatnonzero(A[:, n]):
            row[f"f{sfx}[{sys.lines[l]}]"] = -A[l, n]
            rhs = rhs - Affine.param(f"f[{sys.lines[l]}]", A[l, n])
        m.add_row(f"bal{sfx}[{node}]", row, "=", rhs, symbol=f"lam{sfx}[{node}]")
    _network_rows(m, sys, sfx)
    return m


# results -------------------------------------------------------------------------


@dataclass
class ReserveResult:
    r_up: np.ndarray
    r_dn: np.ndarray
    re_up: np.ndarray
    re_dn: np.ndarray
    price_up: np.ndarray
    price_dn: np.ndarray
    cost: float


@dataclass
class DayAheadResult:
    p: np.ndarray
    w: np.ndarray
    f: np.ndarray
    delta: np.ndarray
    price: np.ndarray
    cost: float
    flow_rc: np.ndarray | None = None  # reduced costs of the flow variables


@dataclass
class BalancingResult:
    scenario: str
    p_up: np.ndarray
    p_dn: np.ndarray
    shed: np.ndarray
    spill: np.ndarray
    f: np.ndarray
    price: np.ndarray
    cost: float
    flow_rc: np.ndarray | None = None


@dataclass
class ClearingOutcome:
    chi: np.ndarray
    coalition: tuple[int, ...]
    reserve: ReserveResult
    day_ahead: DayAheadResult
    balancing: list[BalancingResult]
    prob: np.ndarray
    frozen: list[int] = field(default_factory=list)

    @property
    def scenario_costs(self) -> np.ndarray:
        base = self.reserve.cost + self.day_ahead.cost
        return np.array([base + b.cost for b in self.balancing])

    @property
    def expected_cost(self) -> float:
        return float(self.prob @ self.scenario_costs)


def reserve_env(sys: SystemData, chi: Sequence[float]) -> dict[str, float]:
    return {chi_name(sys, e): float(chi[e]) for e in range(len(sys.links))}


def clear_reserve(sys: SystemData, chi: Sequence[float], opts: SolverOptions | None = None) -> ReserveResult:
    chi = np.asarray(chi, float)
    lp = reserve_model(sys).instantiate(reserve_env(sys, chi))
    sol = solve_lp(lp, opts)
    if not sol.ok:
        short = _reserve_shortfall(sys, chi)
        raise InfeasibleStage("reserve", short)
    v = sol.values()
    r_up = np.array([v.get(f"r_up[{g}]", 0.0) for g in sys.gens])
    r_dn = np.array([v.get(f"r_dn[{g}]", 0.0) for g in sys.gens])
    re_up = np.array([v[f"re_up[{e}]"] for e in sys.links])
    re_dn = np.array([v[f"re_dn[{e}]"] for e in sys.links])
    pu = np.array([sol.dual(f"req_up[{a}]") for a in sys.areas])
    pd = np.array([sol.dual(f"req_dn[{a}]") for a in sys.areas])
    return ReserveResult(r_up, r_dn, re_up, re_dn, pu, pd, sol.objective)


def _reserve_shortfall(sys: SystemData, chi: np.ndarray) -> str:
    ga = sys.gen_area
    Te = sys.link_cap
    for a, area in enumerate(sys.areas):
        imp = sum(chi[e] * Te[e] for e in range(len(sys.links)) if sys.H[e, a] != 0)
        if sys.up_cap[ga == a].sum() + imp < sys.req_up[a] - 1e-9:
            return f"upward requirement of area {area} cannot be covered"
        if sys.down_cap[ga == a].sum() + imp < sys.req_down[a] - 1e-9:
            return f"downward requirement of area {area} cannot be covered"
    return "requirements cannot be covered jointly"


def da_env(sys: SystemData, chi, reserve: ReserveResult) -> dict[str, float]:
    env = reserve_env(sys, chi)
    for i, g in enumerate(sys.gens):
        env[f"r_up[{g}]"] = float(reserve.r_up[i])
        env[f"r_dn[{g}]"] = float(reserve.r_dn[i])
    return env


def clear_day_ahead(
    sys: SystemData, chi: Sequence[float], reserve: ReserveResult, opts: SolverOptions | None = None
) -> DayAheadResult:
    chi = np.asarray(chi, float)
    lp = day_ahead_model(sys).instantiate(da_env(sys, chi, reserve))
    sol = solve_lp(lp, opts)
    if not sol.ok:
        raise InfeasibleStage("day-ahead", "demand cannot be served within reserve-adjusted capacities")
    v = sol.values()
    return DayAheadResult(
        p=np.array([v[f"p[{g}]"] for g in sys.gens]),
        w=np.array([v[f"w[{j}]"] for j in sys.winds]),
        f=np.array([v[f"f[{l}]"] for l in sys.lines]),
        delta=np.array([v[f"delta[{n}]"] for n in sys.nodes]),
        price=np.array([sol.dual(f"bal[{n}]") for n in sys.nodes]),
        cost=sol.objective,
        flow_rc=_reduced(lp, sol, [f"f[{l}]" for l in sys.lines]),
    )


def bal_env(sys: SystemData, reserve: ReserveResult, da: DayAheadResult) -> dict[str, float]:
    env: dict[str, float] = {}
    for i, g in enumerate(sys.gens):
        env[f"r_up[{g}]"] = float(reserve.r_up[i])
        env[f"r_dn[{g}]"] = float(reserve.r_dn[i])
    for j, w in enumerate(sys.winds):
        env[f"w[{w}]"] = float(da.w[j])
    for l, name in enumerate(sys.lines):
        env[f"f[{name}]"] = float(da.f[l])
    return env


def clear_balancing(
    sys: SystemData,
    chi: Sequence[float],
    da: DayAheadResult,
    reserve: ReserveResult,
    s: int,
    coalition: Iterable[int] = (),
    opts: SolverOptions | None = None,
) -> BalancingResult:
    frozen = frozen_links(sys, chi, coalition)
    model = balancing_model(sys, s, frozen)
    lp = model.instantiate(bal_env(sys, reserve, da))
    sol = solve_lp(lp, opts)
    if not sol.ok:
        raise InfeasibleStage("balancing", f"scenario {sys.scenarios[s]}")
    v = sol.values()
    sfx = f"_{sys.scenarios[s]}"
    return BalancingResult(
        scenario=sys.scenarios[s],
        p_up=np.array([v.get(f"p_up{sfx}[{g}]", 0.0) for g in sys.gens]),
        p_dn=np.array([v.get(f"p_dn{sfx}[{g}]", 0.0) for g in sys.gens]),
        shed=np.array([v.get(f"shed{sfx}[{n}]", 0.0) for n in sys.nodes]),
        spill=np.array([v[f"spill{sfx}[{j}]"] for j in sys.winds]),
        f=np.array([v[f"f{sfx}[{l}]"] for l in sys.lines]),
        price=np.array([sol.dual(f"bal{sfx}[{n}]") for n in sys.nodes]),
        cost=sol.objective,
        flow_rc=_reduced(lp, sol, [f"f{sfx}[{l}]" for l in sys.lines]),
    )


def _reduced(lp, sol, names) -> np.ndarray:
    return np.array([sol.reduced_costs[lp.var(n)] for n in names])


def run_sequential(
    sys: SystemData,
    chi: Sequence[float] | None = None,
    coalition: Iterable[int] = (),
    opts: SolverOptions | None = None,
) -> ClearingOutcome:
    chi = np.zeros(len(sys.links)) if chi is None else np.asarray(chi, float)
    coalition = tuple(sorted(set(coalition)))
    res = clear_reserve(sys, chi, opts)
    da = clear_day_ahead(sys, chi, res, opts)
    bal = [clear_balancing(sys, chi, da, res, s, coalition, opts) for s in range(len(sys.scenarios))]
    return ClearingOutcome(chi, coalition, res, da, bal, sys.prob.copy(), frozen_links(sys, chi, coalition))

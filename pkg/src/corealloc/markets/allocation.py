"""Budget-balanced split of each floor's cost among areas.

Every floor is settled at its marginal prices.  Consumer and producer
surpluses stay with the area where they arise, congestion rent of an
intra-area line goes to that area and the rent of a tie-line (or of a reserve
exchange over a link) is halved between the two areas it joins.  A line earns
rent only through its capacity multiplier, so unconstrained lines carry none.  The stage
cost equals minus the sum of all surpluses and rents, so the area shares add up
to the cost exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clearing import ClearingOutcome
from .system import SystemData


@dataclass
class StageSurplus:
    cs: np.ndarray
    ps: np.ndarray
    cr: np.ndarray

    @property
    def cost(self) -> np.ndarray:
        return -(self.cs + self.ps + self.cr)


@dataclass
class AreaCosts:
    areas: list[str]
    scenarios: list[str]
    reserve: StageSurplus
    day_ahead: StageSurplus
    balancing: list[StageSurplus]

    @property
    def per_scenario(self) -> np.ndarray:
        """scenarios x areas matrix of J_a^s."""
        base = self.reserve.cost + self.day_ahead.cost
        return np.array([base + b.cost for b in self.balancing])


def _split_rent(sys: SystemData, rents_by_line: np.ndarray) -> np.ndarray:
    out = np.zeros(len(sys.areas))
    for l, r in enumerate(rents_by_line):
        a, b = sys.line_areas(l)
        if a == b:
            out[a] += r
        else:
            out[a] += r / 2
            out[b] += r / 2
    return out


def reserve_surplus(sys: SystemData, out: ClearingOutcome) -> StageSurplus:
    res = out.reserve
    na = len(sys.areas)
    ga = sys.gen_area
    cs = -(res.price_up * sys.req_up + res.price_dn * sys.req_down)
    ps = np.zeros(na)
    for i in range(len(sys.gens)):
        a = ga[i]
        ps[a] += (res.price_up[a] - sys.up_offer[i]) * res.r_up[i]
        ps[a] += (res.price_dn[a] - sys.down_offer[i]) * res.r_dn[i]
    cr = np.zeros(na)
    for e in range(len(sys.links)):
        rent = sum(
            sys.H[e, a] * (res.price_up[a] * res.re_up[e] + res.price_dn[a] * res.re_dn[e]) for a in range(na)
        )
        ends = np.flatnonzero(sys.H[e] != 0)
        cr[ends] += rent / len(ends)
    return StageSurplus(cs, ps, cr)


def day_ahead_surplus(sys: SystemData, out: ClearingOutcome) -> StageSurplus:
    da = out.day_ahead
    na = len(sys.areas)
    lam = da.price
    cs = np.zeros(na)
    np.add.at(cs, sys.node_area, -lam * sys.demand)
    ps = np.zeros(na)
    np.add.at(ps, sys.gen_area, (lam[sys.gen_node] - sys.offer) * da.p)
    np.add.at(ps, sys.wind_area, (lam[sys.wind_node] - sys.wind_offer) * da.w)
    # rent of each line is its bound multiplier times its flow
    rents = -da.flow_rc * da.f
    return StageSurplus(cs, ps, _split_rent(sys, rents))


def balancing_surplus(sys: SystemData, out: ClearingOutcome, s: int) -> StageSurplus:
    b = out.balancing[s]
    da = out.day_ahead
    na = len(sys.areas)
    lam = b.price
    ps = np.zeros(na)
    np.add.at(ps, sys.gen_area, (lam[sys.gen_node] - sys.offer) * (b.p_up - b.p_dn))
    np.add.at(ps, sys.node_area, (lam - sys.shed_cost) * b.shed)
    dev = sys.wind_scen[s] - da.w - b.spill
    np.add.at(ps, sys.wind_area, lam[sys.wind_node] * dev)
    rents = -b.flow_rc * (b.f - da.f)
    return StageSurplus(np.zeros(na), ps, _split_rent(sys, rents))


def allocate_area_costs(sys: SystemData, out: ClearingOutcome) -> AreaCosts:
    """Per-area costs J_a^s whose sum over areas equals J^s."""
    if out.reserve.price_up is None or out.day_ahead.price is None:
        raise ValueError("marginal prices are required at every stage")
    return AreaCosts(
        areas=list(sys.areas),
        scenarios=list(sys.scenarios),
        reserve=reserve_surplus(sys, out),
        day_ahead=day_ahead_surplus(sys, out),
        balancing=[balancing_surplus(sys, out, s) for s in range(len(out.balancing))],
    )

"""Payment rules and core machinery for auctions over a winner determination J(B_S).

Utilities are revealed ones, ``u_l = p_l - b_l(x_l)``, unless true costs are
given.  The core of a profile is described by the winners W only: a
utility vector is in the revealed core when it is nonnegative and, for every
K subset of W, the winners in K get at most J(B without K) - J(B) together.

The maximum-payment core-selecting rule is computed by core constraint
generation: an inflated winner determination finds the most blocking
coalition, its constraint joins a master LP that maximizes total utility,
and a projection QP breaks ties toward the VCG utilities.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from math import gcd
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .markets.auctions import AuctionOutcome, AuctionProblem, BidCurve, BlockAuction, NetworkAuction
from .solver import INF, LinearProgram, QuadraticProgram, SolverOptions, solve_lp, solve_qp

MAX_CORE_WINNERS = 10
MAX_SUPERMODULAR_GROUND = 12


class MechanismError(RuntimeError):
    """A payment rule cannot be applied to this profile."""


class GuardError(MechanismError):
    """An exhaustive check was refused because the instance is too large."""


# ---------------------------------------------------------------------------
# coalition values


class CoalitionValues:
    """Memoized J(B_S) for one problem and bid profile.

    Lookups may run concurrently; insertion is serialized.
    """

    def __init__(self, problem: AuctionProblem, bids: Sequence[BidCurve], opts: SolverOptions | None = None):
        problem.check_bids(bids)
        self.problem = problem
        self.bids = list(bids)
        self.opts = opts
        self.calls = 0
        self._memo: dict[frozenset, AuctionOutcome] = {}
        self._lock = threading.Lock()

    @property
    def everyone(self) -> frozenset:
        return frozenset(range(self.problem.n))

    def outcome(self, S: Iterable[int] | None = None) -> AuctionOutcome:
        key = self.everyone if S is None else frozenset(S)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        out = self.problem.evaluate(self.bids, sorted(key), None, self.opts)
        with self._lock:
            self.calls += 1
            return self._memo.setdefault(key, out)

    def J(self, S: Iterable[int] | None = None) -> float:
        return self.outcome(S).J

    def without(self, K: Iterable[int]) -> float:
        return self.J(self.everyone - frozenset(K))


def _values(problem, bids, values: CoalitionValues | None, opts=None) -> CoalitionValues:
    if values is not None:
        if values.problem is not problem or values.bids != list(bids):
            raise MechanismError("coalition values belong to a different profile")
        return values
    return CoalitionValues(problem, bids, opts)


# ---------------------------------------------------------------------------
# outcomes


@dataclass
class PaymentOutcome:
    rule: str
    x: np.ndarray
    payments: np.ndarray
    revealed: np.ndarray
    J: float
    d: float = 0.0
    true_utilities: np.ndarray | None = None
    in_core: bool | None = None
    trace: list = field(default_factory=list)
    core: "CoreDescription | None" = None

    @property
    def operator_utility(self) -> float:
        """u_0 = -sum p - d; positive means the operator runs a surplus."""
        return float(-self.payments.sum() - self.d)

    @property
    def winners(self) -> tuple[int, ...]:
        return tuple(int(l) for l in np.flatnonzero(np.abs(self.x) > 1e-7))


def _bid_costs(bids: Sequence[BidCurve], x: np.ndarray) -> np.ndarray:
    return np.array([b(xl) for b, xl in zip(bids, x)])


def _outcome(rule, V: CoalitionValues, payments: np.ndarray, costs, trace=None) -> PaymentOutcome:
    full = V.outcome()
    x = full.x
    payments = np.where(np.abs(x) > 1e-7, payments, 0.0)
    bidc = _bid_costs(V.bids, x)
    out = PaymentOutcome(rule, x.copy(), payments, payments - bidc, full.J, full.d, trace=trace or [])
    if costs is not None:
        out.true_utilities = payments - _bid_costs(costs, x)
    return out


def _full(problem, bids, values, opts) -> CoalitionValues:
    V = _values(problem, bids, values, opts)
    if not V.outcome().feasible:
        raise MechanismError("the auction has no feasible allocation")
    return V


def pay_as_bid(problem, bids, costs=None, values=None, opts=None) -> PaymentOutcome:
    V = _full(problem, bids, values, opts)
    x = V.outcome().x
    return _outcome("payasbid", V, _bid_costs(V.bids, x), costs)


def vcg_utilities(V: CoalitionValues) -> np.ndarray:
    """Clarke-pivot revealed utilities J(B_-l) - J(B), zero for losers."""
    full = V.outcome()
    u = np.zeros(V.problem.n)
    for l in full.winners:
        Jl = V.without([l])
        if not np.isfinite(Jl):
            raise MechanismError(f"removing bidder {V.problem.bidders[l]} leaves the auction infeasible")
        u[l] = Jl - full.J
    return u


def vcg(problem, bids, costs=None, values=None, opts=None) -> PaymentOutcome:
    V = _full(problem, bids, values, opts)
    x = V.outcome().x
    return _outcome("vcg", V, _bid_costs(V.bids, x) + vcg_utilities(V), costs)


def lmp(problem, bids, costs=None, values=None, opts=None) -> PaymentOutcome:
    if not isinstance(problem, NetworkAuction):
        raise MechanismError("nodal pricing needs a network auction")
    V = _full(problem, bids, values, opts)
    full = V.outcome()
    prices = problem.central_prices(V.bids, opts) if full.feasible else None
    if prices is None:
        raise MechanismError("nodal duals are unavailable")
    pay = np.array([problem.node_price(prices, l) * full.x[l] for l in range(problem.n)])
    return _outcome("lmp", V, pay, costs)


# ---------------------------------------------------------------------------
# core membership


@dataclass
class CoreCheck:
    in_core: bool
    max_excess: float  # max over K of sum_K u - (J(B_-K) - J(B))
    coalition: tuple[int, ...]  # the K attaining it
    bound: float  # J(B_-K) - J(B) for that K
    min_utility: float


def check_in_core(
    problem, bids, utilities, values=None, tol: float = 1e-6, override: bool = False, opts=None
) -> CoreCheck:
    """Test the 2^|W| reduced core constraints plus nonnegativity."""
    V = _full(problem, bids, values, opts)
    full = V.outcome()
    W = full.winners
    if len(W) > MAX_CORE_WINNERS and not override:
        raise GuardError(f"{len(W)} winners exceed the exhaustive core check limit {MAX_CORE_WINNERS}")
    u = np.asarray(utilities, dtype=float)
    best = (-INF, (), INF)
    for r in range(1, len(W) + 1):
        for K in itertools.combinations(W, r):
            bound = V.without(K) - full.J
            exc = float(u[list(K)].sum() - bound)
            if exc > best[0] + 1e-12:
                best = (exc, K, bound)
    losers = [l for l in range(problem.n) if l not in W]
    umin = float(u.min()) if len(u) else 0.0
    ok = best[0] <= tol * (1 + abs(full.J)) and umin >= -tol and all(abs(u[l]) <= tol for l in losers)
    return CoreCheck(ok, best[0], best[1], best[2], umin)


@dataclass
class CoreDescription:
    winners: tuple[int, ...]
    constraints: list[tuple[tuple[int, ...], float]]  # (K, bound on sum of utilities in K)
    level: float  # -J(B)


def ccg_violation(problem, bids, utilities, opts=None) -> tuple[float, tuple[int, ...]]:
    """Minimize J(B_C) + sum of winners' utilities in C over coalitions C.

    Each winner's bid is raised by its utility whenever it supplies, so the
    minimizing allocation reveals the most blocking coalition.
    """
    u = np.asarray(utilities, dtype=float)
    inflate = {l: float(u[l]) for l in range(problem.n) if u[l] > 0}
    out = problem.evaluate(bids, None, inflate, opts)
    if not out.feasible:
        raise MechanismError("the inflated winner determination is infeasible")
    return out.J, out.winners


def _master(W, constraints, cap) -> tuple[float, np.ndarray]:
    """max sum u over the generated constraints, then the point nearest cap."""
    lp = LinearProgram("ccg-master", "max")
    idx = {l: lp.add_var(f"u[{l}]", 0.0, max(0.0, cap[l]), 1.0) for l in W}
    for k, (K, bound) in enumerate(constraints):
        lp.add_constraint({idx[l]: 1.0 for l in K}, "<=", max(bound, 0.0), f"core{k}")
    sol = solve_lp(lp)
    if not sol.ok:
        raise MechanismError(f"core master LP ended with status {sol.status}")
    nu = sol.objective
    qp = QuadraticProgram("ccg-tie")
    jdx = {l: qp.add_var(f"u[{l}]", 0.0, max(0.0, cap[l])) for l in W}
    for k, (K, bound) in enumerate(constraints):
        qp.add_constraint({jdx[l]: 1.0 for l in K}, "<=", max(bound, 0.0), f"core{k}")
    qp.add_constraint({j: 1.0 for j in jdx.values()}, "=", nu, "level")
    for l, j in jdx.items():
        qp.add_square({j: 1.0}, cap[l])
    tie = solve_qp(qp)
    if not tie.ok:
        raise MechanismError(f"core tie-break QP ended with status {tie.status}")
    u = np.zeros(len(cap))
    for l, j in jdx.items():
        u[l] = tie.x[j]
    return nu, u


def mpcs(
    problem, bids, costs=None, values=None, opts=None, tol: float = 1e-6, max_iter: int = 100
) -> PaymentOutcome:
    """Maximum-payment core-selecting payments by core constraint generation."""
    V = _full(problem, bids, values, opts)
    full = V.outcome()
    W = full.winners
    cap = vcg_utilities(V)
    u = cap.copy()
    constraints: list[tuple[tuple[int, ...], float]] = []
    trace = []
    for k in range(max_iter):
        try:
            z, C = ccg_violation(problem, V.bids, u, opts)
        except MechanismError as exc:
            raise MechanismError(f"iteration {k}: {exc}") from exc
        target = full.J + u[list(W)].sum()
        trace.append({"iteration": k, "z": z, "target": target, "coalition": C, "utilities": u.copy()})
        if z >= target - tol * (1 + abs(full.J)):
            break
        inside = [l for l in W if l in C]
        K = tuple(l for l in W if l not in C)
        bound = z - u[inside].sum() - full.J
        constraints.append((K, bound))
        trace[-1]["cut"] = (K, bound)
        _, u = _master(W, constraints, cap)
    else:
        raise MechanismError(f"core constraint generation did not converge in {max_iter} iterations")
    pay = _bid_costs(V.bids, full.x) + u
    out = _outcome("mpcs", V, pay, costs, trace)
    out.core = CoreDescription(W, constraints, -full.J)
    return out


RULES: dict[str, Callable[..., PaymentOutcome]] = {
    "payasbid": pay_as_bid,
    "lmp": lmp,
    "vcg": vcg,
    "mpcs": mpcs,
}


def pay(rule: str, problem, bids, **kw) -> PaymentOutcome:
    try:
        fn = RULES[rule]
    except KeyError:
        raise MechanismError(f"unknown rule {rule!r}; valid rules: {', '.join(RULES)}") from None
    return fn(problem, bids, **kw)


def deviation_bound(problem, bids, l, rule: str = "mpcs", values=None, opts=None) -> float:
    """Largest gain bidder l can get from a unilateral deviation: u_VCG - u_rule.

    ``bids`` are read as true costs for bidder l and as the others' bids.
    """
    l = problem.index(l)
    V = _full(problem, bids, values, opts)
    u_vcg = vcg_utilities(V)[l]
    out = pay(rule, problem, bids, values=V, opts=opts)
    return float(u_vcg - out.revealed[l])


# ---------------------------------------------------------------------------
# supermodularity and bid conditions


@dataclass
class SupermodularityReport:
    ok: bool
    witness: tuple | None = None  # (S | R, S & R, S, R) on failure
    gap: float = 0.0  # f(S|R) + f(S&R) - f(S) - f(R) at the witness

    def describe(self, names: Callable[[frozenset], str] = lambda s: "{" + ",".join(map(str, sorted(s))) + "}") -> str:
        if self.ok:
            return "supermodular"
        u, i, s, r = self.witness
        return f"f({names(u)}) + f({names(i)}) < f({names(s)}) + f({names(r)})"


def is_supermodular(
    f: Callable[[frozenset], float], ground: Sequence[Hashable], tol: float = 1e-9, override: bool = False
) -> SupermodularityReport:
    """Pairwise test f(T+i+j) + f(T) >= f(T+i) + f(T+j) over all T and i, j outside T.

    The pairwise form is equivalent to the lattice inequality over all
    pairs of subsets.  Infinite values are compared in the extended reals.
    """
    ground = list(ground)
    if len(ground) > MAX_SUPERMODULAR_GROUND and not override:
        raise GuardError(f"{len(ground)} elements exceed the supermodularity check limit {MAX_SUPERMODULAR_GROUND}")
    cache: dict[frozenset, float] = {}

    def val(S: frozenset) -> float:
        if S not in cache:
            cache[S] = float(f(S))
        return cache[S]

    for r in range(len(ground) + 1):
        for T in itertools.combinations(ground, r):
            T = frozenset(T)
            rest = [g for g in ground if g not in T]
            for i, j in itertools.combinations(rest, 2):
                S, R = T | {i}, T | {j}
                lhs = val(S | R) + val(T)
                rhs = val(S) + val(R)
                if np.isinf(lhs) and lhs > 0:
                    continue
                if rhs > lhs + tol * (1 + abs(lhs) if np.isfinite(lhs) else 1):
                    return SupermodularityReport(False, (S | R, T, S, R), float(lhs - rhs))
    return SupermodularityReport(True)


def check_supermodular(problem, bids=None, values=None, override: bool = False, opts=None) -> SupermodularityReport:
    """Supermodularity of J over bidders, or of the requirement function over types.

    With ``bids`` the set function is S -> J(B_S).  Without, ``problem`` must be
    a block auction and its requirement function M over types is tested.
    """
    if bids is None:
        if not isinstance(problem, BlockAuction):
            raise MechanismError("without bids only a requirement function can be tested")
        return is_supermodular(problem.requirement, problem.type_set, override=override)
    V = _values(problem, bids, values, opts)
    return is_supermodular(V.J, range(problem.n), override=override)


@dataclass
class BidReport:
    ok: bool
    messages: list[str]
    increment: float | None = None


def _common_increment(values: Iterable[float], scale: float = 1e6) -> float:
    ints = [int(round(v * scale)) for v in values if abs(v) > 1e-12]
    if not ints:
        return 0.0
    g = 0
    for v in ints:
        g = gcd(g, abs(v))
    return g / scale


def validate_bid_conditions(bids: Sequence[BidCurve], problem: AuctionProblem | None = None, names=None) -> BidReport:
    """Check that bids are marginally increasing on a common quantity grid.

    For a block auction the requirement function is also checked to be
    normalized, nondecreasing and supermodular.
    """
    names = names or (problem.bidders if problem is not None else [str(k + 1) for k in range(len(bids))])
    msgs: list[str] = []
    blocks = [b for b in bids if b.kind == "blocks"]
    amounts = list(problem.requirements.values()) if isinstance(problem, BlockAuction) else []
    m = _common_increment([q for b in blocks for q in b.quantities] + amounts) if blocks else None
    for name, b in zip(names, bids):
        if b.kind == "pwl":
            if np.any(np.diff(b.slopes()) < -1e-9):
                msgs.append(f"bidder {name}: bid is not convex")
            if b.quantities[-1] > 0 and np.any(b.slopes()[np.asarray(b.quantities[:-1]) >= 0] < 0):
                msgs.append(f"bidder {name}: bid is decreasing on supplied quantities")
            continue
        offered = dict(zip(b.quantities, b.prices))
        steps = int(round(b.hi / m))
        grid = [round(k * m, 9) for k in range(1, steps + 1)]
        missing = [q for q in grid if not any(abs(q - o) <= 1e-9 for o in offered)]
        for q in missing:
            msgs.append(f"bidder {name}: bid price for {q:g} MW is not submitted")
        if missing:
            continue
        cost = [0.0] + [offered[min(offered, key=lambda o: abs(o - q))] for q in grid]
        inc = np.diff(cost)
        for k in range(1, len(inc)):
            if not inc[k] > inc[k - 1]:
                msgs.append(f"bidder {name}: marginal price does not increase at {grid[k]:g} MW")
    if isinstance(problem, BlockAuction):
        types = problem.type_set
        M = problem.requirement
        if M(()) != 0:
            msgs.append("requirement function is not normalized")
        for r in range(len(types) + 1):
            for T in itertools.combinations(types, r):
                for t in types:
                    if t not in T and M(set(T) | {t}) < M(T) - 1e-9:
                        msgs.append(f"requirement function decreases from {set(T) or '{}'} to {set(T) | {t}}")
        rep = is_supermodular(M, types)
        if not rep.ok:
            msgs.append("requirement function is not supermodular: " + rep.describe(lambda s: "{" + ",".join(sorted(s)) + "}"))
    return BidReport(not msgs, msgs, m)


# ---------------------------------------------------------------------------
# price functions


@dataclass
class PriceTable:
    """psi_l(x) = c_l(x) + u_l off zero, psi_l(0) = 0, tabulated on each domain."""

    quantities: list[list[float]]
    prices: list[list[float]]
    utility_max_ok: bool  # each x*_l maximizes psi_l - c_l
    operator_min_ok: bool  # x* minimizes sum psi_l + d
    operator_gap: float


def construct_core_prices(problem, costs, utilities, opts=None, tol: float = 1e-6) -> PriceTable:
    """Price functions supporting a core point as a competitive equilibrium."""
    u = np.asarray(utilities, dtype=float)
    V = _full(problem, costs, None, opts)
    full = V.outcome()
    qs, ps = [], []
    ok_i = True
    for l, c in enumerate(costs):
        dom = c.domain()
        psi = [0.0 if abs(q) <= 1e-12 else c(q) + u[l] for q in dom]
        qs.append(dom)
        ps.append(psi)
        gains = [p - c(q) for q, p in zip(dom, psi)]
        here = u[l] if abs(full.x[l]) > 1e-7 else 0.0
        ok_i &= here >= max(gains) - tol
    z, _ = ccg_violation(problem, costs, u, opts)
    total = full.J + u[list(full.winners)].sum()
    gap = float(z - total)
    return PriceTable(qs, ps, bool(ok_i), bool(gap >= -tol * (1 + abs(total))), gap)

"""Generic procurement auctions: bid curves and the winner determination J(B_S).

Two problem families are provided.  :class:`BlockAuction` buys goods of
several types from exclusive-block bids subject to coverage requirements
``sum of x over bidders of types T >= M(T)``.  :class:`NetworkAuction` is a
DC power-flow dispatch where every bidder sits at a node and bids a convex
piecewise-linear curve, with signed quantities allowed for buyers.

Both evaluate a restricted profile: bidders outside ``S`` are held at zero.
An optional inflation ``u_l`` is added to a bidder's cost whenever its
quantity is nonzero, which needs one binary per inflated bidder.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..schemas import validate
from ..solver import INF, LinearProgram, MixedIntegerProgram, SolverOptions, solve_lp, solve_milp


class BidError(ValueError):
    """A bid curve is malformed."""


@dataclass(frozen=True)
class BidCurve:
    """A bid as breakpoints (quantity, cumulative price).

    ``blocks``: exclusive offers; the price of supplying x is the cheapest
    block whose quantity covers x.  ``pwl``: a convex piecewise-linear cost
    interpolated between breakpoints whose quantity range contains zero.
    """

    kind: str
    quantities: tuple[float, ...]
    prices: tuple[float, ...]
    zero_at_zero: bool = True

    def __post_init__(self):
        q, c = self.quantities, self.prices
        if self.kind not in ("blocks", "pwl"):
            raise BidError(f"unknown bid kind {self.kind!r}")
        if len(q) != len(c) or not q:
            raise BidError("quantities and prices must be nonempty and of equal length")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise BidError("bid quantities must be strictly increasing")
        if not all(math.isfinite(v) for v in (*q, *c)):
            raise BidError("bid data must be finite")
        if self.kind == "blocks":
            if q[0] <= 0:
                raise BidError("block quantities must be positive")
        else:
            if not q[0] <= 0 <= q[-1]:
                raise BidError("a piecewise-linear bid must cover zero")
            s = self.slopes()
            if np.any(np.diff(s) < -1e-9):
                raise BidError("a piecewise-linear bid must be convex")
            if self.zero_at_zero and abs(float(np.interp(0.0, q, c))) > 1e-9:
                raise BidError("bid must cost nothing at zero quantity")

    # constructors -------------------------------------------------------
    @classmethod
    def blocks(cls, offers: Iterable[tuple[float, float]]) -> "BidCurve":
        offers = sorted((float(q), float(p)) for q, p in offers)
        return cls("blocks", tuple(q for q, _ in offers), tuple(p for _, p in offers))

    @classmethod
    def pwl(cls, quantities: Sequence[float], prices: Sequence[float]) -> "BidCurve":
        return cls("pwl", tuple(map(float, quantities)), tuple(map(float, prices)))

    @classmethod
    def quadratic(
        cls, a: float, b: float, lo: float, hi: float, step: float = 1.0, knots: Sequence[float] = ()
    ) -> "BidCurve":
        """Discretize a x^2 + b x on [lo, hi] with breakpoints on a grid through zero."""
        if step <= 0 or lo > 0 or hi < 0:
            raise BidError("need step > 0 and lo <= 0 <= hi")
        k_lo, k_hi = math.ceil(lo / step - 1e-9), math.floor(hi / step + 1e-9)
        grid = {round(k * step, 12) for k in range(k_lo, k_hi + 1)} | {lo, hi} | {
            float(k) for k in knots if lo <= k <= hi
        }
        q = np.array(sorted(grid))
        return cls.pwl(q, a * q * q + b * q)

    def zeroed(self) -> "BidCurve":
        """The same offered quantities at zero price."""
        return BidCurve(self.kind, self.quantities, tuple(0.0 for _ in self.prices), self.zero_at_zero)

    # evaluation ----------------------------------------------------------
    @property
    def lo(self) -> float:
        return 0.0 if self.kind == "blocks" else self.quantities[0]

    @property
    def hi(self) -> float:
        return self.quantities[-1]

    def slopes(self) -> np.ndarray:
        q, c = np.asarray(self.quantities), np.asarray(self.prices)
        return np.diff(c) / np.diff(q)

    def __call__(self, x: float, tol: float = 1e-9) -> float:
        x = float(x)
        if abs(x) <= tol:
            return 0.0
        if self.kind == "blocks":
            cover = [p for q, p in zip(self.quantities, self.prices) if q >= x - tol and x > 0]
            return min(cover) if cover else INF
        if x < self.quantities[0] - tol or x > self.quantities[-1] + tol:
            return INF
        return float(np.interp(x, self.quantities, self.prices))

    def domain(self) -> list[float]:
        """Quantities a bidder can be allocated, zero included."""
        return sorted({0.0, *self.quantities})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "quantities": list(self.quantities), "prices": list(self.prices)}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BidCurve":
        kind = doc["kind"]
        if kind == "blocks":
            return cls.blocks(zip(doc["quantities"], doc["prices"]))
        if kind == "quadratic":
            return cls.quadratic(doc["a"], doc["b"], doc["lo"], doc["hi"], doc.get("step", 1.0), doc.get("knots", ()))
        return cls.pwl(doc["quantities"], doc["prices"])


@dataclass
class AuctionOutcome:
    """Winner determination result for one restricted profile.

    ``J`` includes any inflation terms that were requested.
    """

    J: float
    x: np.ndarray
    feasible: bool = True
    prices: np.ndarray | None = None  # nodal duals when the problem is an LP
    d: float = 0.0

    @property
    def winners(self) -> tuple[int, ...]:
        return tuple(int(l) for l in np.flatnonzero(np.abs(self.x) > 1e-7))


def _infeasible(n: int) -> AuctionOutcome:
    return AuctionOutcome(INF, np.zeros(n), feasible=False)


class AuctionProblem:
    """Common interface: ``evaluate(bids, S, inflate)`` returns J(B_S) and x*."""

    bidders: list[str]
    exchange: bool = False

    @property
    def n(self) -> int:
        return len(self.bidders)

    def index(self, bidder) -> int:
        if isinstance(bidder, (int, np.integer)):
            return int(bidder)
        return self.bidders.index(bidder)

    def evaluate(
        self,
        bids: Sequence[BidCurve],
        active: Iterable[int] | None = None,
        inflate: Mapping[int, float] | None = None,
        opts: SolverOptions | None = None,
    ) -> AuctionOutcome:
        raise NotImplementedError

    def check_bids(self, bids: Sequence[BidCurve]) -> None:
        if len(bids) != self.n:
            raise BidError(f"expected {self.n} bids, got {len(bids)}")


@dataclass
class BlockAuction(AuctionProblem):
    """Reverse auction for typed goods with exclusive-block bids.

    ``requirements`` maps a set of types T to M(T); the market must buy at
    least M(T) from bidders whose type is in T.
    """

    bidders: list[str]
    types: list[str]
    requirements: dict[frozenset, float]
    exchange: bool = False

    def __post_init__(self):
        if len(self.types) != len(self.bidders):
            raise BidError("one type per bidder is required")
        self.requirements = {frozenset(k): float(v) for k, v in self.requirements.items()}

    @property
    def type_set(self) -> list[str]:
        return sorted(set(self.types))

    def requirement(self, T: Iterable[str]) -> float:
        return self.requirements.get(frozenset(T), 0.0)

    def evaluate(self, bids, active=None, inflate=None, opts=None) -> AuctionOutcome:
        self.check_bids(bids)
        active = range(self.n) if active is None else sorted(set(active))
        inflate = inflate or {}
        mip = MixedIntegerProgram("blocks")
        qty: dict[int, dict[int, float]] = {}
        obj: dict[int, float] = {}
        for l in active:
            b = bids[l]
            if b.kind != "blocks":
                raise BidError(f"bidder {self.bidders[l]} needs a block bid")
            qty[l] = {}
            for i, (q, p) in enumerate(zip(b.quantities, b.prices)):
                z = mip.add_binary(f"z[{self.bidders[l]},{i}]")
                qty[l][z] = q
                obj[z] = p + float(inflate.get(l, 0.0))
            mip.add_constraint({z: 1.0 for z in qty[l]}, "<=", 1.0, f"one[{self.bidders[l]}]")
        for T, M in sorted(self.requirements.items(), key=lambda kv: sorted(kv[0])):
            row = {z: q for l in qty if self.types[l] in T for z, q in qty[l].items()}
            if M > 0 and not row:
                return _infeasible(self.n)
            if row:
                mip.add_constraint(row, ">=", M, f"req[{','.join(sorted(T))}]")
        mip.set_objective(obj)
        if mip.num_vars == 0:
            return AuctionOutcome(0.0, np.zeros(self.n))
        sol = solve_milp(mip, opts)
        if not sol.ok:
            return _infeasible(self.n)
        x = np.zeros(self.n)
        for l, zs in qty.items():
            x[l] = sum(q for z, q in zs.items() if sol.x[z] > 0.5)
        return AuctionOutcome(float(sol.objective), x)


@dataclass
class NetworkAuction(AuctionProblem):
    """DC power-flow dispatch with one node per bidder and nodal demand.

    Lines are ``(from, to, capacity)`` with an optional susceptance (default 1).
    Node 0 is the angle reference.
    """

    bidders: list[str]
    nodes: list[str]
    bidder_nodes: list[str]
    lines: list[tuple]
    demand: dict[str, float] = field(default_factory=dict)
    exchange: bool = False

    def __post_init__(self):
        if len(self.bidder_nodes) != len(self.bidders):
            raise BidError("one node per bidder is required")
        unknown = {n for n in self.bidder_nodes if n not in self.nodes}
        unknown |= {n for ln in self.lines for n in ln[:2] if n not in self.nodes}
        if unknown:
            raise BidError(f"unknown nodes {sorted(unknown)}")

    def build(self, bids, active, inflate) -> tuple[LinearProgram, dict[int, int]]:
        lp = MixedIntegerProgram("dcopf")
        xs: dict[int, int] = {}
        for l in active:
            b = bids[l]
            if b.kind != "pwl":
                raise BidError(f"bidder {self.bidders[l]} needs a piecewise-linear bid")
            if not self.exchange and b.lo < 0:
                raise BidError(f"bidder {self.bidders[l]} offers negative quantities outside exchange mode")
            name = self.bidders[l]
            xs[l] = lp.add_var(f"x[{name}]", b.lo, b.hi)
            q, s = np.asarray(b.quantities), b.slopes()
            zero = int(np.searchsorted(q, 0.0))
            gate = lp.add_binary(f"on[{name}]", float(inflate[l])) if l in inflate else None
            row = {xs[l]: 1.0}
            for k in range(len(s)):
                width = q[k + 1] - q[k]
                if k >= zero:  # segments above zero fill upward
                    j = lp.add_var(f"up[{name},{k}]", 0.0, width, s[k])
                    row[j] = -1.0
                else:  # segments below zero fill downward
                    j = lp.add_var(f"dn[{name},{k}]", 0.0, width, -s[k])
                    row[j] = 1.0
            lp.add_constraint(row, "=", 0.0, f"def[{name}]")
            if gate is not None:
                # x = 0 unless the bidder is on; cancelling segments only add cost
                lp.add_constraint({xs[l]: 1.0, gate: -b.hi}, "<=", 0.0, f"gate_hi[{name}]")
                lp.add_constraint({xs[l]: 1.0, gate: -b.lo}, ">=", 0.0, f"gate_lo[{name}]")
        theta = {n: lp.add_var(f"theta[{n}]", 0.0 if k == 0 else -INF, 0.0 if k == 0 else INF)
                 for k, n in enumerate(self.nodes)}
        flows = []
        for k, ln in enumerate(self.lines):
            a, b, cap = ln[0], ln[1], float(ln[2])
            sus = float(ln[3]) if len(ln) > 3 else 1.0
            f = lp.add_var(f"f[{a}-{b}]", -cap, cap)
            lp.add_constraint({f: 1.0, theta[a]: -sus, theta[b]: sus}, "=", 0.0, f"flow[{a}-{b}]")
            flows.append((a, b, f))
        for n in self.nodes:
            row: dict[int, float] = {}
            for l, j in xs.items():
                if self.bidder_nodes[l] == n:
                    row[j] = row.get(j, 0.0) + 1.0
            for a, b, f in flows:
                if a == n:
                    row[f] = row.get(f, 0.0) - 1.0
                elif b == n:
                    row[f] = row.get(f, 0.0) + 1.0
            lp.add_constraint(row, "=", float(self.demand.get(n, 0.0)), f"bal[{n}]")
        return lp, xs

    def evaluate(self, bids, active=None, inflate=None, opts=None) -> AuctionOutcome:
        self.check_bids(bids)
        active = range(self.n) if active is None else sorted(set(active))
        inflate = {l: float(u) for l, u in (inflate or {}).items() if l in set(active)}
        lp, xs = self.build(bids, active, inflate)
        sol = solve_milp(lp, opts) if inflate else solve_lp(lp, opts)
        if not sol.ok:
            return _infeasible(self.n)
        x = np.zeros(self.n)
        for l, j in xs.items():
            x[l] = sol.x[j]
        x[np.abs(x) < 1e-9] = 0.0
        prices = None
        if not inflate:
            prices = np.array([sol.dual(f"bal[{n}]") for n in self.nodes])
        return AuctionOutcome(float(sol.objective), x, True, prices)

    def central_prices(self, bids, opts=None, h: float = 1e-6) -> np.ndarray | None:
        """Nodal duals averaged over the extreme points of the dual optimal face.

        With breakpoints at the optimum the balance duals are not unique.
        Shifting one nodal demand by +-h selects the optimal dual that
        maximizes or minimizes that node's price; the mean of these duals is
        again optimal.
        """
        lp, _ = self.build(bids, range(self.n), {})
        picks = []
        for n in self.nodes:
            i = lp.row(f"bal[{n}]")
            base = lp.rhs[i]
            for sgn in (1.0, -1.0):
                lp.rhs[i] = base + sgn * h
                sol = solve_lp(lp, opts)
                if sol.ok:
                    picks.append([sol.dual(f"bal[{m}]") for m in self.nodes])
            lp.rhs[i] = base
        return np.mean(picks, axis=0) if picks else None

    def node_price(self, prices: np.ndarray, l: int) -> float:
        return float(prices[self.nodes.index(self.bidder_nodes[l])])


def subsets(items: Sequence[int]) -> Iterable[tuple[int, ...]]:
    for r in range(len(items) + 1):
        yield from itertools.combinations(items, r)


def problem_from_dict(doc: Mapping) -> AuctionProblem:
    kind = doc["kind"]
    if kind == "blocks":
        reqs = {frozenset(r["types"]): float(r["amount"]) for r in doc["requirements"]}
        return BlockAuction(list(doc["bidders"]), list(doc["types"]), reqs, bool(doc.get("exchange", False)))
    if kind == "network":
        lines = [tuple(ln) for ln in doc["lines"]]
        return NetworkAuction(
            list(doc["bidders"]), list(doc["nodes"]), list(doc["bidder_nodes"]), lines,
            {str(k): float(v) for k, v in doc.get("demand", {}).items()}, bool(doc.get("exchange", False)),
        )
    raise BidError(f"unknown auction kind {kind!r}")


def load_problem(path: str | Path) -> AuctionProblem:
    doc = json.loads(Path(path).read_text())
    validate(doc, "auction")
    return problem_from_dict(doc)


def _curve(doc: Mapping) -> BidCurve:
    body = {k: v for k, v in doc.items() if k != "zeroed"}
    c = BidCurve.from_dict(body)
    return c.zeroed() if doc.get("zeroed", False) else c


def load_bids(path: str | Path, problem: AuctionProblem) -> tuple[list[BidCurve], list[BidCurve] | None, str]:
    """Bids in bidder order, optional true costs, and the currency tag."""
    doc = json.loads(Path(path).read_text())
    validate(doc, "bids")

    def ordered(table: Mapping) -> list[BidCurve]:
        unknown = set(table) - set(problem.bidders)
        if unknown:
            raise BidError(f"bids name unknown bidders {sorted(unknown)}")
        missing = [b for b in problem.bidders if b not in table]
        if missing:
            raise BidError(f"no bid for bidders {missing}")
        return [_curve(table[b]) for b in problem.bidders]

    bids = ordered(doc["bids"])
    costs = ordered(doc["costs"]) if "costs" in doc else None
    return bids, costs, doc.get("currency", "")

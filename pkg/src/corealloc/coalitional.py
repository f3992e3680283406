"""Benefit allocation over coalition value functions.

A game maps coalitions of areas to the cost saving they achieve together.
Allocations are computed by the Shapley formula, a sequential-LP nucleolus,
and a least-core-selecting rule that generates coalition constraints on
demand through a violation oracle.
"""

from __future__ import annotations

import math
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .solver import LinearProgram, QuadraticProgram, SolverOptions, solve_lp, solve_qp

MAX_SHAPLEY_PLAYERS = 12
MAX_NUCLEOLUS_PLAYERS = 8
MAX_ENUMERATION_PLAYERS = 16


class GameError(RuntimeError):
    """Raised when an allocation routine cannot certify its result."""


class EnumerationGuard(ValueError):
    """The requested method would enumerate too many coalitions."""


Coalition = frozenset


def _key(C: Iterable[int]) -> frozenset:
    return frozenset(int(a) for a in C)


# ---------------------------------------------------------------------------
# game view


class GameView:
    """Memoized coalition values for a player set.

    ``value`` receives a sorted tuple of player indices.  ``oracle`` may
    replace enumeration when searching for the coalition with the largest
    excess; it receives beta and returns (coalition, value).
    """

    def __init__(
        self,
        players: Sequence,
        value: Callable[[tuple[int, ...]], float],
        nondecreasing: bool = False,
        oracle: Callable[[np.ndarray], tuple[Iterable[int], float]] | None = None,
        name: str = "game",
        workers: int = 1,
    ):
        self.players = list(players)
        self.n = len(self.players)
        self._value = value
        self.nondecreasing = nondecreasing
        self.oracle = oracle
        self.name = name
        self.workers = max(1, int(workers))
        self._memo: dict[frozenset, float] = {frozenset(): 0.0}
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_table(cls, players: Sequence, table: Mapping, nondecreasing: bool | None = None, name: str = "table"):
        """Game from explicit values; missing coalitions raise on access."""
        vals = {_key(C): float(v) for C, v in table.items()}

        def lookup(C):
            try:
                return vals[_key(C)]
            except KeyError:
                raise GameError(f"no value for coalition {sorted(C)}") from None

        game = cls(players, lookup, False, name=name)
        if nondecreasing is None:
            complete = sum(1 for k in vals if k) == 2 ** len(players) - 1
            nondecreasing = complete and len(players) <= MAX_ENUMERATION_PLAYERS and game.is_nondecreasing()
        game.nondecreasing = nondecreasing
        return game

    @property
    def grand(self) -> frozenset:
        return frozenset(range(self.n))

    def index(self, p) -> int:
        if isinstance(p, (int, np.integer)) and 0 <= p < self.n and p not in self.players:
            return int(p)
        return self.players.index(p)

    def v(self, C: Iterable[int]) -> float:
        k = _key(C)
        with self._lock:
            if k in self._memo:
                return self._memo[k]
        if not k <= self.grand:
            raise GameError(f"coalition {sorted(k)} is not a subset of the players")
        val = float(self._value(tuple(sorted(k))))
        self.store(k, val)
        return val

    def store(self, C: Iterable[int], val: float, tol: float = 1e-6) -> None:
        """Record a value; stored values never change."""
        k = _key(C)
        with self._lock:
            old = self._memo.get(k)
            if old is None:
                self.calls += len(k) > 0
                self._memo[k] = float(val)
            elif abs(old - val) > tol * (1.0 + abs(old)):
                raise GameError(f"coalition {sorted(k)} already has value {old}, not {val}")

    @property
    def memo(self) -> dict[frozenset, float]:
        with self._lock:
            return dict(self._memo)

    def evaluate(self, coalitions: Iterable[Iterable[int]]) -> list[float]:
        cs = [_key(C) for C in coalitions]
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(self.v, cs))
        return [self.v(C) for C in cs]

    def coalitions(self, proper: bool = True, nonempty: bool = True) -> list[frozenset]:
        _guard(self.n, MAX_ENUMERATION_PLAYERS, "coalition enumeration")
        out = []
        for r in range(1 if nonempty else 0, self.n + (0 if proper else 1)):
            out.extend(frozenset(c) for c in combinations(range(self.n), r))
        return out

    def values(self) -> dict[frozenset, float]:
        """All coalition values, grand coalition included."""
        cs = self.coalitions(proper=False)
        return dict(zip(cs, self.evaluate(cs)))

    def marginals(self) -> np.ndarray:
        """v(A) - v(A minus a) for every player."""
        vA = self.v(self.grand)
        return np.array([vA - self.v(self.grand - {a}) for a in range(self.n)])

    def most_violated(self, beta: np.ndarray) -> tuple[frozenset, float]:
        """Coalition maximizing v(C) - beta(C), with its value."""
        if self.oracle is not None:
            C, val = self.oracle(np.asarray(beta, float))
            return _key(C), float(val)
        best, best_val, best_ex = frozenset(), 0.0, 0.0
        for C in self.coalitions():
            val = self.v(C)
            ex = val - float(sum(beta[a] for a in C))
            if ex > best_ex:
                best, best_val, best_ex = C, val, ex
        return best, best_val

    def is_nondecreasing(self, tol: float = 1e-9) -> bool:
        vals = self.values()
        for C, val in vals.items():
            for a in C:
                if vals.get(C - {a}, 0.0) > val + tol * (1.0 + abs(val)):
                    return False
        return True

    def monotonicity_violations(self, tol: float = 1e-6) -> list[tuple[frozenset, frozenset, float]]:
        """Evaluated pairs C' within C with v(C') > v(C)."""
        memo = self.memo
        out = []
        for C, val in memo.items():
            for D, w in memo.items():
                if D < C and w > val + tol * (1.0 + abs(val)):
                    out.append((D, C, w - val))
        return out

    def label(self, C: Iterable[int]) -> str:
        return "{" + ",".join(str(self.players[a]) for a in sorted(C)) + "}"


def _guard(n: int, limit: int, what: str) -> None:
    if n > limit:
        raise EnumerationGuard(f"{what} needs all coalitions of {n} players; the limit is {limit}")


# ---------------------------------------------------------------------------
# allocations


@dataclass
class BenefitVector:
    beta: np.ndarray
    method: str
    players: list
    epsilon: float = 0.0
    criterion: np.ndarray | None = None
    family: dict[frozenset, float] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)

    def __getitem__(self, a):
        return self.beta[a]

    @property
    def total(self) -> float:
        return float(self.beta.sum())

    def excess(self, game: GameView, C: Iterable[int]) -> float:
        return game.v(C) - float(sum(self.beta[a] for a in C))

    def rows(self) -> list[dict]:
        return [
            {"area": p, "method": self.method, "beta": float(b)}
            for p, b in zip(self.players, self.beta)
        ]


def excess(game: GameView, beta: Sequence[float], C: Iterable[int]) -> float:
    return game.v(C) - float(sum(beta[a] for a in C))


def max_excess(game: GameView, beta: Sequence[float]) -> tuple[float, frozenset]:
    """Largest excess over proper nonempty coalitions."""
    best, arg = -math.inf, frozenset()
    for C in game.coalitions():
        e = excess(game, beta, C)
        if e > best:
            best, arg = e, C
    return best, arg


def shapley(game: GameView) -> BenefitVector:
    _guard(game.n, MAX_SHAPLEY_PLAYERS, "the Shapley value")
    n = game.n
    vals = game.values()
    w = [0.0] + [math.factorial(s - 1) * math.factorial(n - s) / math.factorial(n) for s in range(1, n + 1)]
    beta = np.zeros(n)
    for C, val in vals.items():
        for a in C:
            beta[a] += w[len(C)] * (val - vals.get(C - {a}, 0.0))
    return BenefitVector(beta, "shapley", game.players)


def criterion_vector(game: GameView, criterion) -> np.ndarray:
    if isinstance(criterion, str):
        if criterion == "marginal":
            return game.marginals()
        if criterion == "equal":
            return np.full(game.n, game.v(game.grand) / game.n)
        raise ValueError(f"unknown criterion {criterion!r}; use 'marginal', 'equal' or a vector")
    c = np.asarray(criterion, float)
    if c.shape != (game.n,):
        raise ValueError(f"criterion needs {game.n} entries, got {c.shape}")
    return c


def _least_core_lp(n, vA, family, nonnegative, opts, eps=None, target=None):
    """Master LP (eps is None) or tie-break QP at a fixed eps."""
    prob = LinearProgram("lc-master") if eps is None else QuadraticProgram("lc-tie")
    lo = 0.0 if nonnegative else -math.inf
    b = [prob.add_var(f"b[{a}]", lo) for a in range(n)]
    e = prob.add_var("eps", 0.0, obj=1.0) if eps is None else None
    prob.add_constraint({j: 1.0 for j in b}, "=", vA, "efficiency")
    for k, (C, val) in enumerate(family):
        row = {b[a]: 1.0 for a in C}
        if e is None:
            prob.add_constraint(row, ">=", val - eps, f"c{k}")
        else:
            row[e] = 1.0
            prob.add_constraint(row, ">=", val, f"c{k}")
    if eps is None:
        sol = solve_lp(prob, opts)
    else:
        for a, j in enumerate(b):
            prob.add_square({j: 1.0}, target[a])
        sol = solve_qp(prob, opts)
    if not sol.ok:
        raise GameError(f"{prob.name} ended with status {sol.status}")
    beta = np.array([sol.x[j] for j in b])
    return (float(sol.x[e]) if e is not None else eps), beta


def least_core_select(
    game: GameView,
    criterion="marginal",
    tol: float = 1e-6,
    max_iter: int = 200,
    nonnegative: bool | None = None,
    seed: Iterable[Iterable[int]] | None = None,
    opts: SolverOptions | None = None,
    log: Callable[[dict], None] | None = None,
) -> BenefitVector:
    """Point of the least core nearest the criterion, by constraint generation.

    Each round solves the master LP for the smallest eps over the generated
    family, projects the criterion onto that eps-core, and asks the game for
    the coalition with the largest excess.  The loop stops once no coalition
    exceeds eps.
    """
    n = game.n
    if nonnegative is None:
        nonnegative = game.nondecreasing
    vA = game.v(game.grand)
    target = criterion_vector(game, criterion)
    scale = 1.0 + abs(vA)
    if seed is None:
        seed = [game.grand - {a} for a in range(n)] if isinstance(criterion, str) and criterion == "marginal" else []
    family: dict[frozenset, float] = {}
    for C in seed:
        C = _key(C)
        if C and C != game.grand:
            family[C] = game.v(C)
    trace: list[dict] = []
    eps_prev = -math.inf
    for k in range(1, max_iter + 1):
        items = list(family.items())
        eps, _ = _least_core_lp(n, vA, items, nonnegative, opts)
        # tiny slack keeps the projection feasible after LP round-off
        eps_tie = eps + 1e-9 * scale
        _, beta = _least_core_lp(n, vA, items, nonnegative, opts, eps_tie, target)
        C, val = game.most_violated(beta)
        eta = val - float(sum(beta[a] for a in C)) if C else 0.0
        rec = {"k": k, "eps": eps, "eta": eta, "coalition": sorted(C), "value": val}
        trace.append(rec)
        if log is not None:
            log(rec)
        if eps < eps_prev - tol * scale:
            raise GameError(f"iteration {k}: eps fell from {eps_prev} to {eps}")
        eps_prev = eps
        if eta <= eps + tol * scale:
            break
        if C in family:
            raise GameError(
                f"iteration {k}: oracle returned {game.label(C)} again with excess {eta:.6g} "
                f"above eps {eps:.6g}; the oracle or the master is inaccurate"
            )
        family[C] = val
        game.store(C, val)
    else:
        raise GameError(f"constraint generation did not converge in {max_iter} iterations")
    fam = {C: val - float(sum(beta[a] for a in C)) for C, val in family.items()}
    return BenefitVector(beta, "leastcore", game.players, max(0.0, eps), target, fam, trace)


def least_core_enumerated(game: GameView, criterion="marginal", nonnegative: bool | None = None, opts=None) -> BenefitVector:
    """Same problem as least_core_select with every coalition written out."""
    if nonnegative is None:
        nonnegative = game.nondecreasing
    vals = game.values()
    vA = vals.pop(game.grand)
    target = criterion_vector(game, criterion)
    items = list(vals.items())
    eps, _ = _least_core_lp(game.n, vA, items, nonnegative, opts)
    _, beta = _least_core_lp(game.n, vA, items, nonnegative, opts, eps + 1e-9 * (1.0 + abs(vA)), target)
    return BenefitVector(beta, "leastcore-enum", game.players, eps, target)


def nucleolus(game: GameView, tol: float = 1e-7, opts: SolverOptions | None = None) -> BenefitVector:
    """Lexicographic minimizer of the sorted excess vector.

    Excesses run over all proper nonempty coalitions with no separate
    individual-rationality bounds, so the result lies in the least core.
    """
    _guard(game.n, MAX_NUCLEOLUS_PLAYERS, "the nucleolus")
    n = game.n
    vals = game.values()
    vA = vals[game.grand]
    scale = 1.0 + max(abs(v) for v in vals.values())
    free = [C for C in game.coalitions()]
    fixed: list[tuple[frozenset, float]] = []
    basis = [np.ones(n)]
    levels = []
    beta = None
    while free and np.linalg.matrix_rank(np.array(basis)) < n:
        t, beta, lp, rows = _nucleolus_stage(n, vals, vA, free, fixed, opts)
        levels.append(t)
        tight = [C for C in free if abs(vals[C] - sum(beta[a] for a in C) - t) <= tol * scale]
        sol_duals = lp
        newly = [C for C in tight if abs(sol_duals.dual(rows[C])) > tol]
        if not newly:
            newly = [C for C in tight if _stuck(n, vals, vA, free, fixed, t, C, opts, tol * scale)]
        if not newly:
            raise GameError(f"nucleolus stage {len(levels)} fixed no coalition")
        for C in newly:
            fixed.append((C, t))
            basis.append(_indicator(n, C))
        rank = np.linalg.matrix_rank(np.array(basis))
        free = [
            C for C in free
            if C not in newly and np.linalg.matrix_rank(np.array(basis + [_indicator(n, C)])) > rank
        ]
    if beta is None or np.linalg.matrix_rank(np.array(basis)) < n:
        # the fixed equalities may leave beta unique before every stage ran
        t, beta, _, _ = _nucleolus_stage(n, vals, vA, free, fixed, opts)
    eps = levels[0] if levels else 0.0
    fam = {C: vals[C] - float(sum(beta[a] for a in C)) for C in game.coalitions()}
    return BenefitVector(beta, "nucleolus", game.players, eps, None, fam, [{"stage": i + 1, "eps": e} for i, e in enumerate(levels)])


def _indicator(n, C) -> np.ndarray:
    x = np.zeros(n)
    x[list(C)] = 1.0
    return x


def _nucleolus_lp(n, vals, vA, free, fixed, t_fixed=None):
    lp = LinearProgram("nucleolus")
    b = [lp.add_var(f"b[{a}]", -math.inf) for a in range(n)]
    t = lp.add_var("t", -math.inf, obj=1.0) if t_fixed is None else None
    lp.add_constraint({j: 1.0 for j in b}, "=", vA, "efficiency")
    for k, (C, e) in enumerate(fixed):
        lp.add_constraint({b[a]: 1.0 for a in C}, "=", vals[C] - e, f"fix{k}")
    rows = {}
    for k, C in enumerate(free):
        row = {b[a]: 1.0 for a in C}
        if t is not None:
            row[t] = 1.0
            lp.add_constraint(row, ">=", vals[C], f"free{k}")
        else:
            lp.add_constraint(row, ">=", vals[C] - t_fixed, f"free{k}")
        rows[C] = f"free{k}"
    return lp, b, t, rows


def _nucleolus_stage(n, vals, vA, free, fixed, opts):
    lp, b, t, rows = _nucleolus_lp(n, vals, vA, free, fixed)
    if not free:
        lp.set_objective({})
    sol = solve_lp(lp, opts)
    if not sol.ok:
        raise GameError(f"nucleolus LP ended with status {sol.status}")
    beta = np.array([sol.x[j] for j in b])
    return (float(sol.x[t]) if free else 0.0), beta, sol, rows


def _stuck(n, vals, vA, free, fixed, t, C, opts, tol) -> bool:
    """True when coalition C stays at excess t on the whole optimal face."""
    lp, b, _, _ = _nucleolus_lp(n, vals, vA, free, fixed, t)
    lp.sense = "max"
    lp.set_objective({b[a]: 1.0 for a in C})
    sol = solve_lp(lp, opts)
    if not sol.ok:
        return True
    return sol.objective - (vals[C] - t) <= tol


# ---------------------------------------------------------------------------
# diagnostics and scenario splits


@dataclass
class CoreReport:
    veto: list[int]
    witnesses: list[tuple[frozenset, float, float]]
    dummies: list[int]
    nonempty: bool | None
    epsilon_star: float | None

    def describe(self, game: GameView) -> str:
        lines = [f"veto areas: {[game.players[a] for a in self.veto]}"]
        lines.append(f"zero-marginal areas: {[game.players[a] for a in self.dummies]}")
        for C, vC, vA in self.witnesses:
            lines.append(f"emptiness witness: v{game.label(C)} = {vC:.4f} > v(all) = {vA:.4f}")
        if self.nonempty is not None:
            lines.append(f"core {'nonempty' if self.nonempty else 'empty'}, least-core eps = {self.epsilon_star:.6g}")
        return "\n".join(lines)


def core_diagnostics(game: GameView, tol: float = 1e-6, enumerate_all: bool | None = None) -> CoreReport:
    """Sufficient conditions for a nonempty or empty core, plus an LP verdict."""
    n = game.n
    vA = game.v(game.grand)
    scale = tol * (1.0 + abs(vA))
    rest = [game.v(game.grand - {a}) for a in range(n)]
    veto = [a for a in range(n) if abs(rest[a]) <= scale]
    if enumerate_all is None:
        enumerate_all = n <= MAX_SHAPLEY_PLAYERS
    witnesses, dummies, nonempty, eps = [], [], None, None
    if enumerate_all:
        vals = game.values()
        witnesses = [(C, v, vA) for C, v in vals.items() if C != game.grand and v > vA + scale]
        dummies = [
            a for a in range(n)
            if all(abs(v - vals.get(C - {a}, 0.0)) <= scale for C, v in vals.items() if a in C)
        ]
        eps = least_core_enumerated(game, np.full(n, vA / n), nonnegative=False).epsilon
        nonempty = eps <= scale
    else:
        dummies = [a for a in range(n) if abs(vA - rest[a]) <= scale]
    if not enumerate_all and veto and game.nondecreasing:
        nonempty = True
    return CoreReport(veto, witnesses, dummies, nonempty, eps)


def scenario_split(beta, expected: GameView | float, scenario: GameView | float, players=None) -> BenefitVector:
    """Scale an expected-value allocation to one scenario's total benefit."""
    b = np.asarray(beta.beta if isinstance(beta, BenefitVector) else beta, float)
    players = players or (beta.players if isinstance(beta, BenefitVector) else list(range(len(b))))
    vbar = expected.v(expected.grand) if isinstance(expected, GameView) else float(expected)
    vs = scenario.v(scenario.grand) if isinstance(scenario, GameView) else float(scenario)
    if abs(vbar) <= 1e-12:
        warnings.warn("expected grand-coalition benefit is zero; scenario split set to zero", RuntimeWarning, stacklevel=2)
        return BenefitVector(np.zeros_like(b), "scenario-split", players)
    return BenefitVector(b / vbar * vs, "scenario-split", players)


# ---------------------------------------------------------------------------
# games over the preemptive model


class PreemptiveGame:
    """Expected and per-scenario games from one preemptive system.

    Coalition costs come from a results ledger, so each coalition is solved
    once.  The violation oracle solves one MILP over all coalitions and the
    proposed coalition is then re-solved through the ledger before its value
    is used.
    """

    def __init__(self, sys, ledger=None, baseline=None, opts: SolverOptions | None = None, solver: str = "builtin",
                 oracle: bool = True, oracle_tol: float = 1e-3, workers: int = 1):
        from .preemptive import ResultsLedger

        self.sys = sys
        self.ledger = ledger if ledger is not None else ResultsLedger()
        self.baseline = np.zeros(len(sys.links)) if baseline is None else np.asarray(baseline, float)
        self.opts = opts
        self.solver = solver
        self.oracle_tol = oracle_tol
        self.use_oracle = oracle
        self.oracle_solves = 0
        self.workers = workers

    def record(self, C: Iterable[int]) -> dict:
        from .preemptive import PreemptiveInstance

        inst = PreemptiveInstance.make(self.sys, C, self.baseline)
        return self.ledger.solve(inst, self.opts, self.solver)

    def J(self, C: Iterable[int]) -> float:
        return float(self.record(C)["J"])

    def J_scenario(self, C: Iterable[int], s: int) -> float:
        return float(self.record(C)["scenario_costs"][s])

    def expected(self) -> GameView:
        J0 = self.J(())

        def value(C):
            return 0.0 if len(C) <= 1 else J0 - self.J(C)

        game = GameView(self.sys.areas, value, nondecreasing=True, name="expected", workers=self.workers)
        if self.use_oracle:
            game.oracle = lambda beta: self._violation(game, beta, J0)
        return game

    def scenario(self, s) -> GameView:
        k = self.sys.scenarios.index(s) if isinstance(s, str) else int(s)
        J0 = self.J_scenario((), k)

        def value(C):
            return 0.0 if len(C) <= 1 else J0 - self.J_scenario(C, k)

        return GameView(self.sys.areas, value, nondecreasing=False, name=f"scenario:{self.sys.scenarios[k]}", workers=self.workers)

    def out_of_sample(self, scen: dict, name: str | None = None) -> GameView:
        """Game for new scenarios, re-cleared at each coalition's in-sample shares."""
        from .markets.clearing import run_sequential
        from .markets.system import with_scenarios

        other = with_scenarios(self.sys, scen)
        cache: dict[tuple, float] = {}

        def cost(C):
            chi = self.baseline if len(C) <= 1 else np.asarray(self.record(C)["chi"], float)
            key = tuple(C)
            if key not in cache:
                cache[key] = float(run_sequential(other, chi, C if len(C) > 1 else ()).expected_cost)
            return cache[key]

        J0 = cost(())

        def value(C):
            return 0.0 if len(C) <= 1 else J0 - cost(C)

        return GameView(self.sys.areas, value, name=name or "out-of-sample")

    def _violation(self, game: GameView, beta: np.ndarray, J0: float) -> tuple[tuple[int, ...], float]:
        from .preemptive import solve_violation

        self.oracle_solves += 1
        res = solve_violation(self.sys, beta, J0, self.baseline, self.opts, self.solver)
        C = res.coalition
        if len(C) <= 1:
            return (), 0.0
        val = game.v(C)
        if abs(val - res.value) > self.oracle_tol * (1.0 + abs(J0)):
            raise GameError(
                f"violation oracle valued {game.label(C)} at {res.value:.6f} but the verified solve gives {val:.6f}"
            )
        return C, val

    def monotonicity_violations(self, tol: float = 1e-6) -> list[tuple[tuple, tuple, float]]:
        """Evaluated pairs C' within C with J(C) > J(C')."""
        from .preemptive import system_digest

        tag = system_digest(self.sys) + "|"
        recs = [r for k, r in self.ledger.records.items() if k.startswith(tag)]
        out = []
        for r in recs:
            for q in recs:
                C, D = set(r["coalition"]), set(q["coalition"])
                if D < C and r["J"] > q["J"] + tol * (1.0 + abs(q["J"])):
                    out.append((tuple(sorted(D)), tuple(sorted(C)), r["J"] - q["J"]))
        return out

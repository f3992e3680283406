"""Command-line driver: ``corealloc clear|pay|preemptive|benefits|sweep``.

Every command writes CSV files plus a ``manifest.json`` that records input
and output digests.  Exit codes: 0 ok, 1 infeasible or unverified result,
2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

EXIT_OK, EXIT_INFEASIBLE, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    """Bad command-line arguments or input files."""


class Infeasible(RuntimeError):
    """A model has no acceptable solution."""


# ---------------------------------------------------------------------------
# manifest and output helpers


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)
    version: str = field(default_factory=_version)
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def add_input(self, path: str | Path | None) -> None:
        if path is not None:
            self.inputs[str(path)] = sha256(path)

    def write(self, out: Path) -> Path:
        for p in list(self.outputs):
            self.outputs[p] = sha256(out / p)
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def verify_manifest(path: str | Path) -> list[str]:
    """Files whose current digest differs from the manifest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    bad = []
    for p, h in doc["inputs"].items():
        if not Path(p).exists() or sha256(p) != h:
            bad.append(p)
    for p, h in doc["outputs"].items():
        q = path.parent / p
        if not q.exists() or sha256(q) != h:
            bad.append(str(q))
    return bad


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "0" if v == 0 else f"{v:.10g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(out: Path, name: str, header: Sequence[str], rows, man: RunManifest) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    path = out / name
    path.write_text(buf.getvalue())
    man.outputs[name] = ""
    return path


def _outdir(p: str) -> Path:
    out = Path(p)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _coalition(text: str | None, areas: Sequence[str]) -> tuple[int, ...]:
    """Area ids or 1-based indices separated by commas; 'all' means every area."""
    if text is None or text.strip() == "":
        return ()
    if text.strip().lower() == "all":
        return tuple(range(len(areas)))
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if tok in areas:
            out.append(areas.index(tok))
        elif tok.isdigit() and 1 <= int(tok) <= len(areas):
            out.append(int(tok) - 1)
        else:
            raise UsageError(f"unknown area {tok!r} in coalition; areas are {list(areas)}")
    return tuple(sorted(set(out)))


def _load_system(args):
    from .markets import load_system

    return load_system(args.system, args.scenarios)


def _solver_opts(args):
    from .solver import SolverOptions

    kw = {}
    if getattr(args, "time_limit", None) is not None:
        kw["time_limit"] = args.time_limit
    if getattr(args, "max_nodes", None) is not None:
        kw["max_nodes"] = args.max_nodes
    return SolverOptions(**kw)


# ---------------------------------------------------------------------------
# commands


def cmd_clear(args) -> int:
    from .markets import allocate_area_costs, load_shares, run_sequential

    t0 = time.perf_counter()
    sysd = _load_system(args)
    chi = load_shares(args.shares, sysd) if args.shares else np.zeros(len(sysd.links))
    C = _coalition(args.coalition, sysd.areas)
    out = _outdir(args.out)
    man = RunManifest("clear", list(args.argv), options={"coalition": [sysd.areas[a] for a in C]})
    for p in (args.system, args.scenarios, args.shares):
        man.add_input(p)
    res = run_sequential(sysd, chi, C)
    alloc = allocate_area_costs(sysd, res)
    cur = sysd.currency
    write_csv(out, "reserve.csv", ["generator", "r_up", "r_down"],
              zip(sysd.gens, res.reserve.r_up, res.reserve.r_dn), man)
    write_csv(out, "day_ahead.csv", ["generator", "p"], zip(sysd.gens, res.day_ahead.p), man)
    rows = []
    for b in res.balancing:
        rows += [(b.scenario, g, u, d) for g, u, d in zip(sysd.gens, b.p_up, b.p_dn)]
    write_csv(out, "balancing.csv", ["scenario", "generator", "up", "down"], rows, man)
    stage = [("reserve", res.reserve.cost, ""), ("day_ahead", res.day_ahead.cost, "")]
    stage += [("balancing", b.cost, b.scenario) for b in res.balancing]
    write_csv(out, "stage_costs.csv", ["stage", "scenario", f"cost_{cur}"], [(s, sc, c) for s, c, sc in stage], man)
    totals = [(s, p, c) for s, p, c in zip(sysd.scenarios, sysd.prob, res.scenario_costs)]
    totals.append(("expected", 1.0, res.expected_cost))
    write_csv(out, "totals.csv", ["scenario", "probability", f"cost_{cur}"], totals, man)
    per = alloc.per_scenario
    rows = [
        (s, a, alloc.reserve.cost[k], alloc.day_ahead.cost[k], alloc.balancing[i].cost[k], per[i, k])
        for i, s in enumerate(sysd.scenarios) for k, a in enumerate(sysd.areas)
    ]
    write_csv(out, "area_costs.csv", ["scenario", "area", "reserve", "day_ahead", "balancing", f"total_{cur}"], rows, man)
    man.wall_times["clear"] = time.perf_counter() - t0
    man.write(out)
    for s, p, c in totals:
        print(f"{s}: {c:.2f} {cur}")
    return EXIT_OK


def cmd_pay(args) -> int:
    from .markets import load_bids, load_problem
    from .mechanisms import RULES, CoalitionValues, pay, vcg_utilities

    if args.rule not in RULES:
        raise UsageError(f"unknown rule {args.rule!r}; valid rules: {', '.join(RULES)}")
    t0 = time.perf_counter()
    prob = load_problem(args.problem)
    bids, costs, cur = load_bids(args.bids, prob)
    out = _outdir(args.out)
    man = RunManifest("pay", list(args.argv), options={"rule": args.rule})
    man.add_input(args.problem)
    man.add_input(args.bids)
    V = CoalitionValues(prob, bids)
    if not V.outcome().feasible:
        raise Infeasible("winner determination has no feasible allocation")
    res = pay(args.rule, prob, bids, costs=costs, values=V)
    # gain available to each bidder from a unilateral deviation, reading bids as true costs
    dev = vcg_utilities(V) - res.revealed
    tu = res.true_utilities if res.true_utilities is not None else [np.nan] * prob.n
    rows = [
        (b, x, p, u, t, d) for b, x, p, u, t, d in zip(prob.bidders, res.x, res.payments, res.revealed, tu, dev)
    ]
    header = ["bidder", "quantity", "payment", "revealed_utility", "true_utility", "deviation_bound"]
    write_csv(out, "payments.csv", header, rows, man)
    summary = [("rule", args.rule), ("currency", cur), ("social_cost", res.J),
               ("operator_utility", res.operator_utility), ("in_core", res.in_core)]
    write_csv(out, "summary.csv", ["key", "value"], summary, man)
    if res.trace:
        rows = [(t["iteration"], t["z"], t["target"], " ".join(prob.bidders[l] for l in t["coalition"]))
                for t in res.trace]
        write_csv(out, "ccg_trace.csv", ["iteration", "z", "target", "winners"], rows, man)
    man.wall_times["pay"] = time.perf_counter() - t0
    man.write(out)
    for b, x, p in zip(prob.bidders, res.x, res.payments):
        print(f"{b}: x={x:.4g} payment={p:.2f} {cur}")
    return EXIT_OK


def _ledger(args, out: Path):
    from .preemptive import ResultsLedger

    return ResultsLedger(args.ledger if args.ledger else out / "ledger.json")


def cmd_preemptive(args) -> int:
    from .preemptive import PreemptiveInstance

    t0 = time.perf_counter()
    sysd = _load_system(args)
    C = _coalition(args.coalition, sysd.areas)
    out = _outdir(args.out)
    ledger = _ledger(args, out)
    man = RunManifest("preemptive", list(args.argv), options={"coalition": [sysd.areas[a] for a in C], "solver": args.solver})
    man.add_input(args.system)
    man.add_input(args.scenarios)
    inst = PreemptiveInstance.make(sysd, C)
    rec = ledger.solve(inst, _solver_opts(args), args.solver)
    if not rec.get("verified", False):
        raise Infeasible("preemptive result failed verification")
    gap = rec.get("gap", 0.0)
    if gap > 1e-6 * (1.0 + abs(rec["J"])):
        print(f"warning: optimality gap {gap:.6g} remains", file=sys.stderr)
    rows = [("J", rec["J"])]
    rows += [(f"chi[{e}]", round(c, 4)) for e, c in zip(sysd.links, rec["chi"])]
    rows += [(f"cost[{k}]", v) for k, v in sorted(rec["stage_costs"].items())]
    rows += [(f"scenario_cost[{s}]", v) for s, v in zip(sysd.scenarios, rec["scenario_costs"])]
    rows += [("gap", gap), ("nodes", rec["nodes"])]
    write_csv(out, "preemptive.csv", ["key", "value"], rows, man)
    shares = {"schema": "corealloc.shares/1", "chi": {e: round(c, 4) for e, c in zip(sysd.links, rec["chi"])}}
    (out / "shares.json").write_text(json.dumps(shares, indent=1) + "\n")
    man.outputs["shares.json"] = ""
    man.options["milp_solves"] = ledger.solves
    man.options["ledger"] = str(ledger.path)
    man.wall_times["preemptive"] = time.perf_counter() - t0
    man.write(out)
    print(f"J = {rec['J']:.2f} {sysd.currency}; chi = {[round(c, 4) for c in rec['chi']]}; solves = {ledger.solves}")
    return EXIT_OK


def _table_game(path):
    from .coalitional import GameView
    from .schemas import validate

    doc = json.loads(Path(path).read_text())
    validate(doc, "game")
    players = doc["players"]
    table = {}
    for row in doc["values"]:
        unknown = set(row["coalition"]) - set(players)
        if unknown:
            raise UsageError(f"game file: unknown players {sorted(unknown)}")
        table[tuple(players.index(p) for p in row["coalition"])] = row["value"]
    for p in range(len(players)):
        table.setdefault((p,), 0.0)
    return GameView.from_table(players, table, doc.get("nondecreasing"), doc.get("name", "table")), doc.get("currency", "")


def cmd_benefits(args) -> int:
    from .coalitional import (
        MAX_NUCLEOLUS_PLAYERS,
        MAX_SHAPLEY_PLAYERS,
        PreemptiveGame,
        core_diagnostics,
        least_core_select,
        nucleolus,
        scenario_split,
        shapley,
    )

    t0 = time.perf_counter()
    if args.method == "leastcore" and args.criterion is None:
        raise UsageError("leastcore needs --criterion marginal|equal")
    if (args.values is None) == (args.system is None):
        raise UsageError("give either --values (game table) or --system with --scenarios")
    out = _outdir(args.out)
    man = RunManifest("benefits", list(args.argv), options={"method": args.method, "criterion": args.criterion, "game": args.game})
    scen_name = None
    if args.game != "expected":
        if not args.game.startswith("scenario:"):
            raise UsageError("--game must be 'expected' or 'scenario:NAME'")
        scen_name = args.game.split(":", 1)[1]
    pg = None
    if args.values is not None:
        if scen_name is not None:
            raise UsageError("scenario games need --system and --scenarios")
        game, cur = _table_game(args.values)
        man.add_input(args.values)
        players = game.players
    else:
        sysd = _load_system(args)
        man.add_input(args.system)
        man.add_input(args.scenarios)
        cur = sysd.currency
        players = sysd.areas
    limit = {"shapley": MAX_SHAPLEY_PLAYERS, "nucleolus": MAX_NUCLEOLUS_PLAYERS}.get(args.method)
    if limit is not None and len(players) > limit:
        raise UsageError(f"{args.method} enumerates all coalitions; {len(players)} players exceed the limit of {limit}")
    if args.values is None:
        pg = PreemptiveGame(sysd, _ledger(args, out), opts=_solver_opts(args), solver=args.solver, workers=args.workers)
        game = pg.expected()

    log_lines = []
    if args.method == "shapley":
        bv = shapley(game)
    elif args.method == "nucleolus":
        bv = nucleolus(game)
    else:
        bv = least_core_select(game, args.criterion, log=log_lines.append)
    target = game
    if scen_name is not None:
        if args.oos:
            man.add_input(args.oos)
            scen_doc = json.loads(Path(args.oos).read_text())
            names = [s["id"] for s in scen_doc["scenarios"]]
            if scen_name not in names:
                raise UsageError(f"scenario {scen_name!r} not in {args.oos}; found {names}")
            doc = {"schema": scen_doc["schema"], "scenarios": [s for s in scen_doc["scenarios"] if s["id"] == scen_name]}
            doc["scenarios"][0] = dict(doc["scenarios"][0], probability=1.0)
            target = pg.out_of_sample(doc, f"scenario:{scen_name}")
        else:
            if scen_name not in sysd.scenarios:
                raise UsageError(f"unknown scenario {scen_name!r}; scenarios are {sysd.scenarios}")
            target = pg.scenario(scen_name)
        bv = scenario_split(bv, game, target)

    label = f"{args.method}" + (f"/{args.criterion}" if args.method == "leastcore" else "")
    rows = [(p, label, args.game, b) for p, b in zip(players, bv.beta)]
    write_csv(out, "benefits.csv", ["area", "method", "game", f"beta_{cur}"], rows, man)
    rows = []
    if target.n <= MAX_SHAPLEY_PLAYERS and (args.values is not None or args.method != "leastcore" or args.full):
        for C, v in sorted(target.values().items(), key=lambda kv: (len(kv[0]), sorted(kv[0]))):
            rows.append((target.label(C), v, v - sum(bv.beta[a] for a in C)))
    else:
        for C, v in sorted(target.memo.items(), key=lambda kv: (len(kv[0]), sorted(kv[0]))):
            if C:
                rows.append((target.label(C), v, v - sum(bv.beta[a] for a in C)))
    write_csv(out, "excess.csv", ["coalition", "value", "excess"], rows, man)
    summary = [("epsilon", bv.epsilon), ("total", bv.total), ("grand_value", target.v(target.grand))]
    if pg is not None:
        summary.append(("milp_solves", pg.ledger.solves))
        summary.append(("oracle_solves", pg.oracle_solves))
    write_csv(out, "summary.csv", ["key", "value"], summary, man)
    if log_lines:
        text = "".join(
            f"{r['k']}\t{r['eps']:.10g}\t{r['eta']:.10g}\t{game.label(r['coalition'])}\t{r['value']:.10g}\n"
            for r in log_lines
        )
        (out / "iterations.log").write_text("k\teps\teta\tcoalition\tvalue\n" + text)
        man.outputs["iterations.log"] = ""
    if target.n <= MAX_SHAPLEY_PLAYERS:
        (out / "diagnostics.txt").write_text(core_diagnostics(target).describe(target) + "\n")
        man.outputs["diagnostics.txt"] = ""
    man.wall_times["benefits"] = time.perf_counter() - t0
    man.write(out)
    print(f"{label} on {args.game}: " + ", ".join(f"{p}={b:.2f}" for p, b in zip(players, bv.beta)) + f" {cur}")
    if args.method == "leastcore":
        print(f"epsilon = {bv.epsilon:.4f} {cur}")
    return EXIT_OK


def _range(text: str) -> np.ndarray:
    try:
        a, b, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--range expects a:b:step, got {text!r}") from None
    if step <= 0 or b < a:
        raise UsageError("--range needs a <= b and step > 0")
    k = int(np.floor((b - a) / step + 1e-9))
    return np.round(a + step * np.arange(k + 1), 12)


def cmd_sweep(args) -> int:
    from .markets import InfeasibleStage, run_sequential

    if args.param != "chi":
        raise UsageError(f"unknown sweep parameter {args.param!r}; only 'chi' is supported")
    t0 = time.perf_counter()
    sysd = _load_system(args)
    grid = _range(args.range)
    if grid.min() < 0 or grid.max() > 1:
        raise UsageError("chi must lie in [0, 1]")
    links = args.link or list(sysd.links)
    for e in links:
        if e not in sysd.links:
            raise UsageError(f"unknown link {e!r}; links are {sysd.links}")
    idx = [sysd.links.index(e) for e in links]
    C = _coalition(args.coalition, sysd.areas)
    out = _outdir(args.out)
    man = RunManifest("sweep", list(args.argv), options={"links": links, "range": args.range, "coalition": [sysd.areas[a] for a in C]})
    man.add_input(args.system)
    man.add_input(args.scenarios)

    def cost(x):
        chi = np.zeros(len(sysd.links))
        chi[idx] = x
        try:
            return run_sequential(sysd, chi, C).expected_cost
        except InfeasibleStage:
            return np.nan

    costs = np.array([cost(x) for x in grid])
    if np.all(np.isnan(costs)):
        raise Infeasible("every point of the sweep is infeasible")
    k = int(np.nanargmin(costs))
    header = ["chi", f"expected_cost_{sysd.currency}", "minimizer"]
    rows = [(x, c, int(i == k)) for i, (x, c) in enumerate(zip(grid, costs))]
    if args.normalize_eps is not None:
        if not 0 < args.normalize_eps <= 1:
            raise UsageError("--normalize-eps must lie in (0, 1]")
        ref = cost(args.normalize_eps)
        man.options["normalize_eps"] = args.normalize_eps
        header.append("normalized")
        rows = [r + (r[1] / ref,) for r in rows]
    write_csv(out, "sweep.csv", header, rows, man)
    man.wall_times["sweep"] = time.perf_counter() - t0
    man.write(out)
    print(f"minimum {costs[k]:.2f} {sysd.currency} at chi = {grid[k]:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corealloc", description="Market clearing, payment rules and benefit allocation.")
    sub = ap.add_subparsers(dest="command", required=True)

    def system_args(p, shares=False):
        p.add_argument("--system", required=True, help="system JSON")
        p.add_argument("--scenarios", required=True, help="scenario JSON")
        if shares:
            p.add_argument("--shares", help="transmission shares JSON (default: all zero)")

    def solver_args(p):
        p.add_argument("--solver", choices=["builtin", "bridge"], default="builtin")
        p.add_argument("--ledger", help="results ledger file (default: OUT/ledger.json)")
        p.add_argument("--time-limit", type=float, help="seconds per MILP")
        p.add_argument("--max-nodes", type=int, help="node limit per MILP")

    p = sub.add_parser("clear", help="clear the sequential reserve, day-ahead and balancing markets")
    system_args(p, shares=True)
    p.add_argument("--coalition", help="areas allowed to net imbalances across zero-share links")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_clear)

    p = sub.add_parser("pay", help="payments under a pricing rule")
    p.add_argument("--rule", required=True, help="payasbid, lmp, vcg or mpcs")
    p.add_argument("--problem", required=True, help="auction JSON")
    p.add_argument("--bids", required=True, help="bids JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pay)

    p = sub.add_parser("preemptive", help="optimal transmission shares for one coalition")
    system_args(p)
    p.add_argument("--coalition", required=True, help="area ids or 1-based indices, or 'all'")
    solver_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preemptive)

    p = sub.add_parser("benefits", help="benefit allocation among areas")
    p.add_argument("--method", required=True, choices=["shapley", "nucleolus", "leastcore"])
    p.add_argument("--criterion", choices=["marginal", "equal"], help="target point for leastcore")
    p.add_argument("--game", default="expected", help="'expected' or 'scenario:NAME'")
    p.add_argument("--values", help="game table JSON instead of a system")
    p.add_argument("--system", help="system JSON")
    p.add_argument("--scenarios", help="scenario JSON")
    p.add_argument("--oos", help="scenario JSON holding out-of-sample scenarios for --game scenario:NAME")
    p.add_argument("--full", action="store_true", help="report excesses of every coalition")
    p.add_argument("--workers", type=int, default=1, help="parallel coalition solves")
    solver_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benefits)

    p = sub.add_parser("sweep", help="expected cost as a function of the transmission share")
    system_args(p)
    p.add_argument("--param", default="chi")
    p.add_argument("--range", required=True, help="a:b:step")
    p.add_argument("--link", action="append", help="link to vary (repeatable; default all)")
    p.add_argument("--coalition", help="areas allowed to net imbalances across zero-share links")
    p.add_argument("--normalize-eps", type=float, help="also report cost divided by the cost at this small share")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    from .coalitional import EnumerationGuard, GameError
    from .markets import BidError, InfeasibleStage
    from .mechanisms import MechanismError
    from .schemas import SchemaError

    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    if getattr(args, "scenarios", None) is not None and getattr(args, "system", None) is None:
        print("error: --scenarios needs --system", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, SchemaError, EnumerationGuard, BidError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Infeasible, InfeasibleStage) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (GameError, MechanismError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

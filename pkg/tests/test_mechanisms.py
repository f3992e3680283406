import itertools

import numpy as np
import pytest

from corealloc.markets import BidCurve, BlockAuction, NetworkAuction, load_bids, load_problem
from corealloc.mechanisms import (
    CoalitionValues,
    GuardError,
    MechanismError,
    ccg_violation,
    check_in_core,
    check_supermodular,
    construct_core_prices,
    deviation_bound,
    is_supermodular,
    lmp,
    mpcs,
    pay,
    pay_as_bid,
    validate_bid_conditions,
    vcg,
)

from conftest import data


def fixture(name, bids="bids_truthful", problem="problem"):
    p = load_problem(data("markets", name, f"{problem}.json"))
    b, costs, _ = load_bids(data("markets", name, f"{bids}.json"), p)
    return p, b, costs


def names(s):
    return "{" + ",".join(sorted(s)) + "}"


# ---------------------------------------------------------------------------
# simple market


def test_simple_market_rules():
    p, b, _ = fixture("simple")
    assert pay_as_bid(p, b).payments == pytest.approx([100, 400, 0])
    v = vcg(p, b)
    assert v.payments == pytest.approx([200, 500, 0])
    assert v.revealed == pytest.approx([100, 100, 0])
    m = mpcs(p, b)
    assert m.revealed == pytest.approx([50, 50, 0])
    assert m.payments == pytest.approx([150, 450, 0])


def test_simple_market_collusion():
    p, b, costs = fixture("simple", "bids_collusive")
    v = vcg(p, b, costs=costs)
    assert v.payments == pytest.approx([600, 600, 0])
    assert v.true_utilities == pytest.approx([500, 200, 0])


def test_simple_market_vcg_outside_core():
    p, b, _ = fixture("simple")
    c = check_in_core(p, b, vcg(p, b).revealed)
    assert not c.in_core
    assert c.coalition == (0, 1)
    assert c.bound == pytest.approx(100.0)
    assert check_in_core(p, b, pay_as_bid(p, b).revealed).in_core


def test_simple_market_bid_conditions():
    p, b, _ = fixture("simple")
    rep = validate_bid_conditions(b, p)
    assert not rep.ok
    assert "bidder 3: bid price for 400 MW is not submitted" in rep.messages


def test_simple_market_core_prices():
    p, b, _ = fixture("simple")
    m = mpcs(p, b)
    t = construct_core_prices(p, b, m.revealed)
    assert t.prices[0][1] == pytest.approx(b[0](400) + 50)
    assert t.prices[1][1] == pytest.approx(b[1](400) + 50)
    assert t.utility_max_ok and t.operator_min_ok
    # pay-as-bid: the price function is the cost itself, losers price zero at zero
    t0 = construct_core_prices(p, b, np.zeros(3))
    for l in range(3):
        assert t0.prices[l] == pytest.approx([b[l](q) for q in t0.quantities[l]])
        assert t0.prices[l][0] == 0.0


# ---------------------------------------------------------------------------
# power market


def test_power_market_vcg_and_collusion():
    p, b, _ = fixture("power")
    assert vcg(p, b).payments == pytest.approx([600, 0, 0, 0, 0])
    pc, bc, _ = fixture("power", "bids_collusive")
    assert vcg(pc, bc).payments == pytest.approx([0, 400, 0, 400, 0])


def test_power_market_requirement_not_supermodular():
    p, _, _ = fixture("power")
    rep = check_supermodular(p)
    assert not rep.ok
    assert rep.describe(names) == "f({A,B,C}) + f({A}) < f({A,B}) + f({A,C})"


def test_power_market_joint_requirement():
    p, b, _ = fixture("power", problem="problem_nested")
    v = vcg(p, b)
    assert v.payments == pytest.approx([0, 400, 0, 400, 0])
    assert v.revealed[[1, 3]] == pytest.approx([50, 150])
    assert check_in_core(p, b, v.revealed).in_core
    assert check_supermodular(p).ok
    assert validate_bid_conditions(b, p).ok


def test_single_bidder_vacuously_supermodular():
    p = BlockAuction(["1"], ["G"], {frozenset("G"): 10})
    assert check_supermodular(p, [BidCurve.blocks([(10, 5)])]).ok


# ---------------------------------------------------------------------------
# four-node network


def test_four_node_truthful_vcg():
    p, b, costs = fixture("four_node")
    v = vcg(p, b, costs=costs)
    assert v.payments == pytest.approx([0, 0, 260], abs=0.01)
    assert v.true_utilities[2] == pytest.approx(120, abs=0.01)


def test_four_node_collusion():
    p, b, costs = fixture("four_node", "bids_collusive")
    v = vcg(p, b, costs=costs)
    assert v.payments == pytest.approx([140, 140, 0], abs=0.01)
    z, C = ccg_violation(p, b, v.revealed)
    assert C == (2,)
    m = mpcs(p, b, costs=costs)
    assert m.payments == pytest.approx([70, 70, 0], abs=0.01)
    assert m.true_utilities[:2] == pytest.approx([-60, -60], abs=0.01)


def test_four_node_collusion_unprofitable_under_mpcs():
    p, b, costs = fixture("four_node")
    pc, bc, _ = fixture("four_node", "bids_collusive")
    honest = mpcs(p, b, costs=costs).true_utilities[:2].sum()
    colluding = mpcs(pc, bc, costs=costs).true_utilities[:2].sum()
    assert colluding <= honest + 1e-6


def test_ccg_zero_utilities_returns_efficient_winners():
    p, b, _ = fixture("four_node")
    V = CoalitionValues(p, b)
    z, C = ccg_violation(p, b, np.zeros(3))
    assert z == pytest.approx(V.J())
    assert C == V.outcome().winners


def test_inflated_loser_changes_nothing():
    p, b, _ = fixture("four_node")
    V = CoalitionValues(p, b)
    u = np.array([25.0, 40.0, 0.0])  # only losers inflated
    out = p.evaluate(b, None, {0: 25.0, 1: 40.0})
    assert out.x == pytest.approx(V.outcome().x)
    assert out.J == pytest.approx(V.J())
    assert ccg_violation(p, b, u)[1] == (2,)


# ---------------------------------------------------------------------------
# two-sided exchange


@pytest.fixture(scope="module")
def two_sided():
    p, b, _ = fixture("two_sided", "bids")
    return p, b, CoalitionValues(p, b)


def test_two_sided_allocation(two_sided):
    p, b, V = two_sided
    assert V.outcome().x == pytest.approx([0.58, 0.58, 4.0, -5.16], abs=0.05)


@pytest.mark.parametrize(
    "rule,budget,bound", [("payasbid", 48.3, 48.3), ("lmp", 2.8, 21.7), ("mpcs", 0.0, 14.9), ("vcg", -34.8, 0.0)]
)
def test_two_sided_budgets_and_bounds(two_sided, rule, budget, bound):
    p, b, V = two_sided
    assert pay(rule, p, b, values=V).operator_utility == pytest.approx(budget, abs=0.2)
    assert deviation_bound(p, b, 3, rule, values=V) == pytest.approx(bound, abs=0.2)


def test_two_sided_bounds_for_every_bidder(two_sided):
    p, b, V = two_sided
    u = vcg(p, b, values=V).revealed
    for l in range(4):
        assert deviation_bound(p, b, l, "vcg", values=V) == pytest.approx(0.0, abs=1e-9)
        assert deviation_bound(p, b, l, "payasbid", values=V) == pytest.approx(u[l])


def test_unknown_rule_lists_rules():
    p, b, _ = fixture("simple")
    with pytest.raises(MechanismError, match="payasbid, lmp, vcg, mpcs"):
        pay("second-price", p, b)


# ---------------------------------------------------------------------------
# nodal prices


def test_uncongested_single_node_price():
    p = NetworkAuction(["a", "b"], ["n"], ["n", "n"], [], {"n": 15.0})
    bids = [BidCurve.pwl([0, 10, 20], [0, 100, 250]), BidCurve.pwl([0, 10, 20], [0, 120, 260])]
    out = lmp(p, bids)
    # a fills its cheap segment, b is marginal on its first segment at 12/MW
    assert out.x == pytest.approx([10.0, 5.0])
    assert out.payments == pytest.approx([120.0, 60.0])


def test_three_bus_congested_hand_kkt():
    # cheap bidder at n1 (10/MW), expensive at n2 (30/MW), demand 12 at n3.
    # Lines with unit susceptance: 1-2, 2-3, 1-3, capacity 5 on 1-3.
    # Flow on 1-3 is 2/3 x1 + 1/3 x2 <= 5 with x1 + x2 = 12, so x1 = 3, x2 = 9.
    # Serving 1 MW more at n3 moves x1 by -1 and x2 by +2: lambda3 = 50.
    p = NetworkAuction(
        ["1", "2"], ["n1", "n2", "n3"], ["n1", "n2"],
        [("n1", "n2", 100.0), ("n2", "n3", 100.0), ("n1", "n3", 5.0)], {"n3": 12.0},
    )
    bids = [BidCurve.pwl([0, 20], [0, 200]), BidCurve.pwl([0, 20], [0, 600])]
    out = lmp(p, bids)
    assert out.x == pytest.approx([3.0, 9.0])
    assert out.payments == pytest.approx([10 * 3.0, 30 * 9.0])
    assert p.central_prices(bids) == pytest.approx([10.0, 30.0, 50.0])


# ---------------------------------------------------------------------------
# property checks


def _random_block_market(rng, n, M):
    bids = []
    for _ in range(n):
        qs = sorted(rng.choice([50, 100], int(rng.integers(1, 3)), replace=False))
        bids.append(BidCurve.blocks(list(zip(qs, np.cumsum(rng.uniform(10, 100, len(qs)))))))
    names_ = [str(i) for i in range(n)]
    return BlockAuction(names_, ["G"] * n, {frozenset("G"): M}), bids


def _scaled(b, f):
    return BidCurve(b.kind, b.quantities, tuple(p * f for p in b.prices))


def test_vcg_dsic_spot_checks():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(40):
        n = int(rng.integers(3, 5))
        p, truth = _random_block_market(rng, n, float(rng.choice([100, 150])))
        try:
            honest = vcg(p, truth, costs=truth).true_utilities
        except MechanismError:
            continue
        for l in range(n):
            for f in (0.0, 0.5, 0.8, 1.25, 2.0):
                lie = list(truth)
                lie[l] = _scaled(truth[l], f)
                try:
                    u = vcg(p, lie, costs=truth).true_utilities[l]
                except MechanismError:
                    continue
                assert honest[l] >= u - 1e-6
                checked += 1
    assert checked > 100


def test_lmp_bounded_by_vcg_50_instances():
    rng = np.random.default_rng(5)
    done = 0
    while done < 50:
        caps = rng.uniform(5, 15, 3)
        p = NetworkAuction(
            list("123"), list("123"), list("123"),
            [("1", "2", caps[0]), ("2", "3", caps[1]), ("1", "3", caps[2])], {"3": float(rng.uniform(5, 15))},
        )
        bids = [BidCurve.quadratic(float(rng.uniform(0.05, 0.5)), float(rng.uniform(1, 20)), 0, 20) for _ in range(3)]
        try:
            V = CoalitionValues(p, bids)
            v, m = vcg(p, bids, values=V), lmp(p, bids, values=V)
        except MechanismError:
            continue
        assert np.all(m.payments <= v.payments + 1e-6)
        done += 1


def test_supermodularity_iff_vcg_in_core():
    """Both directions on random single-good markets with up to four bidders."""
    rng = np.random.default_rng(1)
    seen = {True: 0, False: 0}
    for _ in range(80):
        n = int(rng.integers(3, 5))
        p, bids = _random_block_market(rng, n, float(rng.choice([100, 150])))
        sm = check_supermodular(p, bids).ok
        all_core = True
        for r in range(1, n + 1):
            for R in itertools.combinations(range(n), r):
                sub = BlockAuction([p.bidders[i] for i in R], ["G"] * r, p.requirements)
                sb = [bids[i] for i in R]
                try:
                    v = vcg(sub, sb)
                except MechanismError:
                    continue  # some removal is infeasible
                all_core = all_core and check_in_core(sub, sb, v.revealed).in_core
        assert sm == all_core
        seen[sm] += 1
    assert seen[True] and seen[False]


def test_ccg_fixed_point_in_core():
    rng = np.random.default_rng(9)
    for _ in range(25):
        n = int(rng.integers(3, 6))
        p, bids = _random_block_market(rng, n, float(rng.choice([100, 150, 200])))
        try:
            m = mpcs(p, bids)
        except MechanismError:
            continue
        assert check_in_core(p, bids, m.revealed).in_core
        assert np.all(m.revealed <= vcg(p, bids).revealed + 1e-6)


def test_mpcs_equals_vcg_when_vcg_in_core():
    p, b, _ = fixture("power", problem="problem_nested")
    assert mpcs(p, b).payments == pytest.approx(vcg(p, b).payments)


def test_removal_never_shrinks_remaining_allocations():
    rng = np.random.default_rng(4)
    tested = 0
    for _ in range(30):
        n = int(rng.integers(3, 5))
        bids = []
        for _ in range(n):
            marg = np.sort(rng.uniform(1, 10, 3))  # strictly increasing per 10 MW
            bids.append(BidCurve.blocks(list(zip([10, 20, 30], np.cumsum(marg * 10)))))
        p = BlockAuction([str(i) for i in range(n)], ["G"] * n, {frozenset("G"): float(rng.choice([30, 40, 50]))})
        assert validate_bid_conditions(bids, p).ok
        x = p.evaluate(bids).x
        for l in range(n):
            rest = [k for k in range(n) if k != l]
            out = p.evaluate(bids, rest)
            if not out.feasible:
                continue
            assert np.all(out.x[rest] >= x[rest] - 1e-9)
            tested += 1
    assert tested > 50


def _random_exchange(rng, caps):
    n = int(rng.integers(2, 5))
    p = NetworkAuction(
        [str(i) for i in range(n)], list("123"), [str(rng.integers(1, 4)) for _ in range(n)],
        [("1", "2", caps[0]), ("2", "3", caps[1]), ("1", "3", caps[2])], {}, True,
    )
    bids = []
    for _ in range(n):
        a = float(rng.uniform(0.2, 2))
        if rng.random() < 0.5:
            bids.append(BidCurve.quadratic(a, float(rng.uniform(1, 10)), 0, 6, 0.5))
        else:
            bids.append(BidCurve.quadratic(a, float(rng.uniform(10, 25)), -6, 0, 0.5))
    return p, bids


def test_vcg_exchange_without_limits_runs_a_deficit():
    rng = np.random.default_rng(3)
    for _ in range(40):
        p, b = _random_exchange(rng, [1e3] * 3)
        assert vcg(p, b).operator_utility <= 1e-7


def test_supermodular_exchange_collapses():
    rng = np.random.default_rng(6)
    seen = {True: 0, False: 0}
    for _ in range(40):
        p, b = _random_exchange(rng, [1e3] * 3)
        V = CoalitionValues(p, b)
        ok = check_supermodular(p, b, values=V).ok
        seen[ok] += 1
        if ok:
            for r in range(p.n + 1):
                for S in itertools.combinations(range(p.n), r):
                    assert V.J(S) == pytest.approx(0.0, abs=1e-7)
    assert seen[False] > 0


def test_core_selecting_budget_on_exchanges():
    rng = np.random.default_rng(8)
    for _ in range(30):
        p, b = _random_exchange(rng, rng.uniform(1, 5, 3))
        V = CoalitionValues(p, b)
        if pay_as_bid(p, b, values=V).operator_utility >= 0:
            assert mpcs(p, b, values=V).operator_utility >= -1e-6


# ---------------------------------------------------------------------------
# guards and errors


def test_supermodularity_guard():
    with pytest.raises(GuardError):
        is_supermodular(lambda S: 0.0, range(13))
    assert is_supermodular(lambda S: 0.0, range(13), override=True).ok


def test_core_check_guard():
    n = 11
    p = BlockAuction([str(i) for i in range(n + 1)], ["G"] * (n + 1), {frozenset("G"): n})
    bids = [BidCurve.blocks([(1, 1.0 + i)]) for i in range(n + 1)]
    with pytest.raises(GuardError):
        check_in_core(p, bids, np.zeros(n + 1))


def test_vcg_removal_infeasible_names_bidder():
    p = BlockAuction(["solo", "other"], ["G", "H"], {frozenset("G"): 10})
    bids = [BidCurve.blocks([(10, 5)]), BidCurve.blocks([(10, 1)])]
    with pytest.raises(MechanismError, match="solo"):
        vcg(p, bids)


def test_losers_get_nothing():
    p, b, _ = fixture("power")
    for rule in ("payasbid", "vcg", "mpcs"):
        out = pay(rule, p, b)
        losers = [l for l in range(p.n) if l not in out.winners]
        assert np.all(out.payments[losers] == 0) and np.all(out.revealed[losers] == 0)

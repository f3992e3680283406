import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from corealloc.solver import (
    INF,
    ConfigurationError,
    IterationLimitError,
    LinearProgram,
    MixedIntegerProgram,
    QuadraticProgram,
    SolverOptions,
    ValidationError,
    dual_objective,
    solve_lp,
    solve_milp,
    solve_qp,
)
from corealloc.solver import bridge


# ---------------------------------------------------------------------------
# linear programs


def test_single_active_bound_dual():
    lp = LinearProgram()
    x = lp.add_var("x", -INF, INF, 1.0)
    lp.add_constraint({x: 1.0}, ">=", 3.0, "lo")
    lp.add_constraint({x: 1.0}, "<=", 10.0, "hi")
    s = solve_lp(lp)
    assert s.ok
    assert s.value("x") == pytest.approx(3.0)
    assert s.dual("lo") == pytest.approx(1.0)
    assert s.dual("hi") == pytest.approx(0.0)


def test_degenerate_symmetric_vertex():
    lp = LinearProgram()
    x = lp.add_var("x", 0, INF, -1.0)
    y = lp.add_var("y", 0, INF, -1.0)
    lp.add_constraint({x: 1, y: 1}, "<=", 1)
    lp.add_constraint({x: 1, y: 1}, "<=", 1)
    lp.add_constraint({x: 1}, "<=", 1)
    s = solve_lp(lp)
    assert s.objective == pytest.approx(-1.0)
    assert s.value("x") + s.value("y") == pytest.approx(1.0)


def _vertex_oracle(c, A, b, ub):
    """Minimum of c.x over {Ax <= b, 0 <= x <= ub} by enumerating vertices."""
    n = len(c)
    G = np.vstack([A, -np.eye(n), np.eye(n)])
    h = np.concatenate([b, np.zeros(n), ub])
    best = np.inf
    for act in itertools.combinations(range(len(h)), n):
        M = G[list(act)]
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, h[list(act)])
        if np.all(G @ x <= h + 1e-9):
            best = min(best, float(c @ x))
    return best


@pytest.mark.parametrize("seed", range(20))
def test_random_lp_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=5)
    A = rng.normal(size=(4, 5))
    b = rng.uniform(0.5, 5, 4)  # origin feasible
    ub = rng.uniform(1, 8, 5)
    lp = LinearProgram()
    for j in range(5):
        lp.add_var(f"x{j}", 0, ub[j], c[j])
    for i in range(4):
        lp.add_constraint({j: A[i, j] for j in range(5)}, "<=", b[i])
    s = solve_lp(lp)
    assert s.ok
    assert s.objective == pytest.approx(_vertex_oracle(c, A, b, ub), abs=1e-8)


def _random_lp(rng):
    n, m = int(rng.integers(2, 12)), int(rng.integers(1, 10))
    lb = rng.choice([0.0, -5.0, -np.inf], n)
    ub = np.where(rng.random(n) < 0.5, np.inf, lb + rng.uniform(0, 10, n))
    ub = np.where(np.isinf(lb) & np.isinf(ub), 10.0, ub)
    lp = LinearProgram()
    for j in range(n):
        lp.add_var(f"x{j}", lb[j], ub[j], rng.normal())
    A = rng.normal(size=(m, n)).round(1)
    b = rng.normal(size=m) * 3
    S = rng.choice(["<=", ">=", "="], m, p=[0.45, 0.45, 0.1])
    for i in range(m):
        lp.add_constraint({j: A[i, j] for j in range(n)}, S[i], b[i])
    return lp, A, b, S, lb, ub


def _scipy(lp, A, b, S, lb, ub):
    Aub, bub, Aeq, beq = [], [], [], []
    for i, s in enumerate(S):
        if s == "<=":
            Aub.append(A[i]), bub.append(b[i])
        elif s == ">=":
            Aub.append(-A[i]), bub.append(-b[i])
        else:
            Aeq.append(A[i]), beq.append(b[i])
    bounds = [(None if np.isinf(lo) else lo, None if np.isinf(hi) else hi) for lo, hi in zip(lb, ub)]
    return linprog(
        lp.obj, A_ub=Aub or None, b_ub=bub or None, A_eq=Aeq or None, b_eq=beq or None, bounds=bounds, method="highs"
    )


def test_duality_and_complementary_slackness_200_instances():
    rng = np.random.default_rng(2024)
    optimal = 0
    for _ in range(200):
        lp, A, b, S, lb, ub = _random_lp(rng)
        s = solve_lp(lp)
        ref = _scipy(lp, A, b, S, lb, ub)
        assert s.status == {0: "optimal", 2: "infeasible", 3: "unbounded"}[ref.status]
        if not s.ok:
            continue
        optimal += 1
        obj = s.objective
        assert obj == pytest.approx(ref.fun, abs=1e-6 * (1 + abs(obj)))
        assert abs(obj - dual_objective(lp, s)) <= 1e-6 * (1 + abs(obj))
        assert np.max(np.abs(lp.residuals(s.x)), initial=0.0) <= 1e-7
        slack = b - A @ s.x
        assert np.all(np.abs(s.duals * slack) <= 1e-6)
    assert optimal >= 50


def test_repeated_solves_are_bit_identical():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lp = _random_lp(rng)[0]
        a, b = solve_lp(lp), solve_lp(lp)
        assert a.status == b.status
        assert np.array_equal(a.x, b.x)


def test_unknown_variable_is_a_validation_error():
    lp = LinearProgram()
    lp.add_var("x")
    with pytest.raises(ValidationError):
        lp.add_constraint({3: 1.0}, "<=", 1.0)
    with pytest.raises(ValidationError):
        lp.add_var("bad", 2.0, 1.0)


def test_iteration_limit_is_explicit():
    lp = LinearProgram()
    a = lp.add_var("a", 0, 10, -1)
    for i in range(30):
        j = lp.add_var(f"v{i}", 0, 1, -1)
        lp.add_constraint({j: 1, a: 1}, "<=", 5)
    with pytest.raises(IterationLimitError):
        solve_lp(lp, SolverOptions(max_iter=2))


def test_infeasible_and_unbounded_statuses():
    lp = LinearProgram()
    x = lp.add_var("x", 0, INF, -1)
    assert solve_lp(lp).status == "unbounded"
    lp.add_constraint({x: 1}, "<=", -1)
    assert solve_lp(lp).status == "infeasible"


# ---------------------------------------------------------------------------
# mixed-integer programs


def test_knapsack_six_items_brute_force():
    w = np.array([4, 7, 3, 9, 5, 2])
    v = np.array([10, 13, 7, 16, 8, 3])
    mip = MixedIntegerProgram(sense="max")
    xs = [mip.add_binary(f"x{i}", v[i]) for i in range(6)]
    mip.add_constraint({xs[i]: w[i] for i in range(6)}, "<=", 15)
    best = max(v @ z for z in map(np.array, itertools.product([0, 1], repeat=6)) if w @ z <= 15)
    assert solve_milp(mip).objective == pytest.approx(best)


def test_integral_relaxation_solved_at_root():
    mip = MixedIntegerProgram()
    xs = [mip.add_binary(f"x{i}", c) for i, c in enumerate([3.0, -1.0, 2.0, -4.0])]
    mip.add_constraint({xs[0]: 1, xs[1]: 1}, "<=", 1)
    s = solve_milp(mip)
    assert s.objective == pytest.approx(-5.0)
    assert s.nodes == 1


def test_complementarity_toy():
    mip = MixedIntegerProgram()
    x = mip.add_var("x", 0, 10, 1)
    y = mip.add_var("y", 0, 10, 1)
    mip.add_constraint({x: 1, y: 1}, ">=", 1)
    mip.add_pair(x, y)
    for mode in ("branch", "bigm"):
        s = solve_milp(mip, SolverOptions(complementarity=mode))
        assert s.objective == pytest.approx(1.0)
        assert min(s.x[:2]) == pytest.approx(0.0, abs=1e-9)
        assert max(s.x[:2]) == pytest.approx(1.0)


def test_bigm_without_bounds_is_a_configuration_error():
    mip = MixedIntegerProgram()
    x = mip.add_var("x", 0)
    y = mip.add_var("y", 0)
    mip.add_constraint({x: 1, y: 1}, ">=", 1)
    mip.add_pair(x, y)
    with pytest.raises(ConfigurationError):
        solve_milp(mip, SolverOptions(complementarity="bigm"))
    assert solve_milp(mip).objective == pytest.approx(0.0)


def test_pair_on_signed_variable_rejected():
    mip = MixedIntegerProgram()
    x = mip.add_var("x", -1, 1)
    y = mip.add_var("y", 0, 1)
    with pytest.raises(ValidationError):
        mip.add_pair(x, y)


def test_infeasible_milp_status():
    mip = MixedIntegerProgram()
    x = mip.add_binary("x")
    mip.add_constraint({x: 1}, ">=", 0.5)
    mip.add_constraint({x: 1}, "<=", 0.7)
    assert solve_milp(mip).status == "infeasible"


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(
    n=st.integers(1, 12),
    seed=st.integers(0, 2**32 - 1),
    sense=st.sampled_from(["min", "max"]),
)
def test_milp_equals_brute_force(n, seed, sense):
    rng = np.random.default_rng(seed)
    c = rng.integers(-10, 11, n).astype(float)
    A = rng.integers(-5, 6, (2, n)).astype(float)
    b = rng.integers(-3, 12, 2).astype(float)
    mip = MixedIntegerProgram(sense=sense)
    xs = [mip.add_binary(f"x{i}", c[i]) for i in range(n)]
    for i in range(2):
        mip.add_constraint({xs[j]: A[i, j] for j in range(n)}, "<=", b[i])
    Z = np.array(list(itertools.product([0, 1], repeat=n)), float)
    feas = np.all(Z @ A.T <= b + 1e-9, axis=1)
    s = solve_milp(mip)
    if not feas.any():
        assert s.status == "infeasible"
        return
    vals = Z[feas] @ c
    assert s.objective == pytest.approx(vals.max() if sense == "max" else vals.min(), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 20), seed=st.integers(0, 2**32 - 1))
def test_branching_equals_bigm(k, seed):
    rng = np.random.default_rng(seed)
    mip = MixedIntegerProgram()
    xs = [mip.add_var(f"x{i}", 0, 5, rng.normal()) for i in range(k)]
    ys = [mip.add_var(f"y{i}", 0, 5, rng.normal()) for i in range(k)]
    for _ in range(3):
        coeffs = {j: rng.integers(-2, 3) for j in xs + ys}
        mip.add_constraint(coeffs, "<=", float(rng.integers(1, 6)))
    mip.add_constraint({j: 1.0 for j in xs + ys}, ">=", 1.0)
    for i in range(k):
        mip.add_pair(xs[i], ys[i], f"p{i}")
    a = solve_milp(mip, SolverOptions(complementarity="branch"))
    b = solve_milp(mip, SolverOptions(complementarity="bigm"))
    assert a.status == b.status
    if a.ok:
        assert a.objective == pytest.approx(b.objective, abs=1e-6)
        assert np.all(np.minimum(a.x[xs], a.x[ys]) <= 1e-7)


# ---------------------------------------------------------------------------
# quadratic programs


def _projection(point, eq_total=None):
    qp = QuadraticProgram()
    u = [qp.add_var(f"u{i}", 0.0, INF) for i in range(len(point))]
    for j, p in zip(u, point):
        qp.add_square({j: 1.0}, p)
    if eq_total is not None:
        qp.add_constraint({j: 1.0 for j in u}, "=", eq_total)
    return qp


def test_identity_projection():
    qp = QuadraticProgram()
    u = qp.add_var("u", -INF, INF)
    qp.add_square({u: 1.0}, 4.2)
    qp.add_constraint({u: 1.0}, "=", 4.2)
    assert solve_qp(qp).value("u") == pytest.approx(4.2)


def test_symmetric_projection():
    s = solve_qp(_projection([100.0, 100.0], 100.0))
    assert s.x == pytest.approx([50.0, 50.0])


def _grid_projection(p):
    def best(c1, c2, half, step):
        g1 = np.arange(c1 - half, c1 + half + step / 2, step)
        g2 = np.arange(c2 - half, c2 + half + step / 2, step)
        U1, U2 = np.meshgrid(g1, g2, indexing="ij")
        U3 = 1.0 - U1 - U2
        f = (U1 - p[0]) ** 2 + (U2 - p[1]) ** 2 + (U3 - p[2]) ** 2
        f[(U1 < 0) | (U2 < 0) | (U3 < -1e-12)] = np.inf
        k = np.unravel_index(np.argmin(f), f.shape)
        return U1[k], U2[k]

    u1, u2 = best(0.5, 0.5, 0.5, 2e-3)
    u1, u2 = best(u1, u2, 4e-3, 1e-5)
    return np.array([u1, u2, 1.0 - u1 - u2])


@pytest.mark.parametrize("seed", range(8))
def test_random_projection_matches_grid(seed):
    p = np.random.default_rng(seed).uniform(-1, 2, 3)
    s = solve_qp(_projection(p, 1.0))
    assert s.ok
    assert s.x == pytest.approx(_grid_projection(p), abs=1e-4)


def test_negative_weight_rejected_and_infeasible_status():
    qp = QuadraticProgram()
    u = qp.add_var("u")
    with pytest.raises(ValidationError):
        qp.add_square({u: 1.0}, 0.0, -1.0)
    qp.add_square({u: 1.0}, 0.0)
    qp.add_constraint({u: 1.0}, "<=", -1.0)
    assert solve_qp(qp).status == "infeasible"


# ---------------------------------------------------------------------------
# file bridge


def _toy_mip():
    mip = MixedIntegerProgram("toy", sense="max")
    x = mip.add_var("r_plus[i3]", 0, 4, 2.0)
    y = mip.add_var("B.f_s1[l2-4]", 0, 3, 1.0)
    z = mip.add_binary("b[a1]", 1.5)
    mip.add_constraint({x: 1, y: 1, z: 2}, "<=", 6)
    return mip


def test_bridge_round_trip(tmp_path):
    mip = _toy_mip()
    s = solve_milp(mip)
    bridge.export_problem(mip, tmp_path / "toy.lp")
    path = bridge.write_solution(tmp_path / "toy.sol", s.values())
    back = bridge.import_solution(path, mip)
    assert back.var_names == mip.var_names
    assert np.array_equal(back.x, s.x)
    assert back.objective == pytest.approx(s.objective)


@pytest.mark.parametrize("name", ["r_plus[i3]", "a__b", "B.f_s1[l2-4]", "x y", "é"])
def test_names_survive_escaping(name):
    assert bridge.unescape_name(bridge.escape_name(name)) == name


def test_exported_names_in_lp_file(tmp_path):
    text = bridge.export_problem(_toy_mip(), tmp_path / "toy.lp").read_text()
    assert "Binaries" in text
    assert bridge.escape_name("r_plus[i3]") in text


def test_malformed_solution_names_the_line(tmp_path):
    path = tmp_path / "bad.sol"
    x, y = bridge.escape_name("x"), bridge.escape_name("y")
    path.write_text(f"{x} 1.0\n# fine\n{y} one\n")
    with pytest.raises(bridge.ParseError, match="line 3"):
        bridge.import_solution(path)
    path.write_text(f"{x} 1.0 2.0\n")
    with pytest.raises(bridge.ParseError, match="line 1"):
        bridge.import_solution(path)


def _hand_lp():
    # max x + 2y + 3z, x + y + z <= 10, z <= 4, y <= 5: z = 4, y = 5, x = 1
    lp = MixedIntegerProgram("hand", sense="max")
    x, y, z = (lp.add_var(n, 0, INF, c) for n, c in (("x", 1), ("y", 2), ("z", 3)))
    lp.add_constraint({x: 1, y: 1, z: 1}, "<=", 10)
    lp.add_constraint({z: 1}, "<=", 4)
    lp.add_constraint({y: 1}, "<=", 5)
    return lp


def test_hand_solved_lp_builtin():
    s = solve_lp(_hand_lp())
    assert s.objective == pytest.approx(23.0, abs=1e-8)
    assert s.x == pytest.approx([1.0, 5.0, 4.0])


def test_hand_solved_lp_external():
    pytest.importorskip("highspy")
    s = bridge.solve_external(_hand_lp())
    assert s.objective == pytest.approx(23.0, abs=1e-8)
    t = bridge.solve_external(_toy_mip())
    assert t.objective == pytest.approx(solve_milp(_toy_mip()).objective, abs=1e-8)

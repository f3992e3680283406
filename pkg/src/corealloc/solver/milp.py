"""Branch and bound over binaries and complementarity pairs.

Each node is the LP relaxation with tightened bounds.  A binary is fixed to
0 or 1 in the two children; a complementarity pair is resolved by forcing one
of its two variables to zero in each child, taking by default the first
violated pair in declaration order.  Child LPs are warm started from
the parent basis with the dual simplex.  The search dives depth first until
an incumbent exists, then takes the best-bound node but keeps plunging into
the preferred child of the node just solved.
"""

from __future__ import annotations

import heapq
import time

import numpy as np

from .model import (
    ConfigurationError,
    IterationLimitError,
    MixedIntegerProgram,
    SolverOptions,
    Solution,
)
from .simplex import DenseForm, solve_dense


def encode_big_m(mip: MixedIntegerProgram) -> MixedIntegerProgram:
    """Return a copy where every complementarity pair becomes a binary disjunction."""
    out = mip.copy()
    out.integers = set(mip.integers)
    out.pairs = []
    for k, p in enumerate(mip.pairs):
        m1, m2 = p.big_m if p.big_m is not None else (mip.ub[p.first], mip.ub[p.second])
        if not (np.isfinite(m1) and np.isfinite(m2)):
            raise ConfigurationError(f"pair {p.name or k!r} has no finite big-M and branching is disabled")
        z = out.add_binary(f"cz_{k}" if not p.name else f"cz_{p.name}")
        out.add_constraint({p.first: 1.0, z: -m1}, "<=", 0.0, f"cm1_{k}")
        out.add_constraint({p.second: 1.0, z: m2}, "<=", m2, f"cm2_{k}")
    return out


def solve_milp(mip: MixedIntegerProgram, opts: SolverOptions | None = None) -> Solution:
    opts = opts or SolverOptions()
    if opts.complementarity == "bigm" and mip.pairs:
        enc = encode_big_m(mip)
        sol = _branch_and_bound(enc, opts)
        sol.x = sol.x[: mip.num_vars] if sol.x.size else sol.x
        sol.var_names = list(mip.var_names)
        return sol
    return _branch_and_bound(mip, opts)


def _branch_and_bound(mip: MixedIntegerProgram, opts: SolverOptions) -> Solution:
    if opts.pair_rule not in ("first", "max"):
        raise ConfigurationError(f"unknown pair branching rule {opts.pair_rule!r}")
    form = DenseForm.from_lp(mip)
    n = mip.num_vars
    sign = -1.0 if mip.sense == "max" else 1.0
    ints = np.array(sorted(mip.integers), dtype=int)
    pf = np.array([p.first for p in mip.pairs], dtype=int)
    ps = np.array([p.second for p in mip.pairs], dtype=int)
    tol_int, tol_c = opts.int_tol, opts.feas_tol
    deadline = None if opts.time_limit is None else time.perf_counter() + opts.time_limit

    root_lo, root_hi = form.lo.copy(), form.hi.copy()
    if len(ints):
        root_lo[ints] = np.ceil(root_lo[ints] - tol_int)
        root_hi[ints] = np.floor(root_hi[ints] + tol_int)

    best_x, best_val = None, np.inf
    # nodes whose relaxation exceeds a known feasible value cannot improve on it
    cut = np.inf if opts.cutoff is None else sign * opts.cutoff
    cut += opts.gap_tol * (1.0 + abs(cut)) if np.isfinite(cut) else 0.0
    nodes = 0
    counter = 0
    # heap entries: (key, counter, lo, hi, warm, bound)
    heap: list = []
    stack: list = [(root_lo, root_hi, None, -np.inf)]
    global_bound = -np.inf

    def gap_ok(bound: float) -> bool:
        return best_val - bound <= opts.gap_tol * (1.0 + abs(best_val))

    while stack or heap:
        if deadline is not None and time.perf_counter() > deadline:
            raise IterationLimitError(f"branch and bound time limit hit after {nodes} nodes")
        if stack:
            lo, hi, warm, pbound = stack.pop()
        else:
            pbound, _, lo, hi, warm = heapq.heappop(heap)
            if best_x is not None and gap_ok(pbound):
                heap.clear()
                break
        if best_x is not None and gap_ok(pbound):
            continue
        nodes += 1
        if nodes > opts.max_nodes:
            raise IterationLimitError(f"branch and bound node limit {opts.max_nodes} exceeded")
        res = solve_dense(form, opts, warm, lo, hi, keep_inverse=True)
        if res.status == "unbounded":
            if nodes == 1:
                return Solution(status="unbounded", var_names=list(mip.var_names), nodes=nodes)
            continue
        if res.status != "optimal":
            continue
        x = res.x
        val = float(form.c @ x)
        if best_x is not None and gap_ok(val):
            continue
        if best_x is not None and val >= best_val:
            continue
        if val > cut:
            continue
        # branching candidate
        choice = None
        if len(ints):
            frac = np.abs(x[ints] - np.round(x[ints]))
            k = int(np.argmax(frac))
            if frac[k] > tol_int:
                choice = ("int", int(ints[k]), x[ints[k]])
        if choice is None and len(pf):
            viol = np.minimum(x[pf], x[ps])
            if opts.pair_rule == "first":
                # pairs declared earlier belong to upstream lower levels
                nz = np.flatnonzero(viol > tol_c)
                k = int(nz[0]) if len(nz) else 0
            else:
                k = int(np.argmax(viol))
            if viol[k] > tol_c:
                choice = ("pair", k, viol[k])
        if choice is None:
            best_x, best_val = x.copy(), val
            if opts.log:
                print(f"node {nodes}: incumbent {sign * val:.6f}")
            # pending depth-first nodes move to the best-bound queue
            for clo, chi, w, pb in stack:
                counter += 1
                heapq.heappush(heap, (pb, counter, clo, chi, w.stripped() if w is not None else None))
            stack.clear()
            continue
        children = []
        if choice[0] == "int":
            j, v = choice[1], choice[2]
            lo1, hi1 = lo.copy(), hi.copy()
            hi1[j] = np.floor(v)
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[j] = np.ceil(v)
            down, up = (lo1, hi1), (lo2, hi2)
            children = [up, down] if v - np.floor(v) >= 0.5 else [down, up]
        else:
            k = choice[1]
            a, b = int(pf[k]), int(ps[k])
            za = (lo.copy(), hi.copy())
            za[1][a] = 0.0
            zb = (lo.copy(), hi.copy())
            zb[1][b] = 0.0
            # zero the smaller side first
            children = [za, zb] if x[a] <= x[b] else [zb, za]
        children = [ch for ch in children if np.all(ch[0] <= ch[1] + 1e-12)]
        if not children:
            continue
        # plunge into the preferred child, which reuses the parent's inverse;
        # siblings wait without it to bound memory
        slim = res.basis.stripped() if res.basis is not None else None
        (plo, phi), rest = children[0], children[1:]
        for clo, chi in rest:
            if best_x is None:
                stack.append((clo, chi, slim, val))
            else:
                counter += 1
                heapq.heappush(heap, (val, counter, clo, chi, slim))
        stack.append((plo, phi, res.basis, val))

    names = list(mip.var_names)
    if best_x is None:
        return Solution(status="infeasible", var_names=names, nodes=nodes)
    global_bound = heap[0][0] if heap else best_val
    x = best_x[:n].copy()
    if len(ints):
        x[ints] = np.round(x[ints])
    gap = max(0.0, best_val - min(global_bound, best_val))
    return Solution(
        status="optimal",
        x=x,
        objective=mip.objective_value(x),
        var_names=names,
        row_names=list(mip.row_names),
        nodes=nodes,
        gap=gap,
        bound=sign * min(global_bound, best_val),
    )

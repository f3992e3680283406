"""Dense primal active-set method for small convex quadratic programs.

The start point is a feasible vertex from the simplex phase one.  Each
iteration minimizes the objective on the current working set with a
null-space step; directions of zero curvature are followed until a
constraint blocks them.
"""

from __future__ import annotations

import numpy as np

from .model import (
    INF,
    IterationLimitError,
    LinearProgram,
    QuadraticProgram,
    Solution,
    SolverOptions,
    ValidationError,
)
from .simplex import solve_lp


def _null_space(C: np.ndarray, n: int, tol: float = 1e-10) -> np.ndarray:
    if C.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(C)
    rank = int(np.sum(s > tol * max(1.0, s[0] if len(s) else 0.0)))
    return vt[rank:].T


def solve_qp(qp: QuadraticProgram, opts: SolverOptions | None = None) -> Solution:
    """Minimize 0.5 x'Qx + q'x subject to the rows and bounds of ``qp``.

    Duals follow the LP convention: gradient = A'y + reduced costs.
    """
    opts = opts or SolverOptions()
    n = qp.num_vars
    names, rnames = list(qp.var_names), list(qp.row_names)
    Q, q, const = qp.hessian_terms()
    if n and np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-9 * max(1.0, np.abs(Q).max()):
        raise ValidationError("quadratic term is not positive semidefinite")
    _, A, senses, b, lb, ub = qp.dense()

    # inequalities as G x <= h, tagged with their origin for dual recovery
    G, h, tag = [], [], []
    E, e = [], []
    for i, s in enumerate(senses):
        if s == "<=":
            G.append(A[i]), h.append(b[i]), tag.append(("row", i, 1.0))
        elif s == ">=":
            G.append(-A[i]), h.append(-b[i]), tag.append(("row", i, -1.0))
        else:
            E.append(A[i]), e.append(b[i])
    eq_rows = [i for i, s in enumerate(senses) if s == "="]
    for j in range(n):
        if lb[j] == ub[j]:
            row = np.zeros(n)
            row[j] = 1.0
            E.append(row), e.append(lb[j])
            eq_rows.append(("var", j))
            continue
        if lb[j] > -INF:
            row = np.zeros(n)
            row[j] = -1.0
            G.append(row), h.append(-lb[j]), tag.append(("var", j, -1.0))
        if ub[j] < INF:
            row = np.zeros(n)
            row[j] = 1.0
            G.append(row), h.append(ub[j]), tag.append(("var", j, 1.0))
    G = np.array(G).reshape(-1, n)
    h = np.array(h)
    E = np.array(E).reshape(-1, n)

    # feasible start
    lp = LinearProgram(qp.name + ":phase1")
    lp.__dict__.update({k: v for k, v in qp.copy().__dict__.items() if k in lp.__dict__})
    lp.set_objective({})
    start = solve_lp(lp, opts)
    if not start.ok:
        return Solution(status="infeasible", var_names=names, row_names=rnames)
    x = start.x.astype(float).copy()

    tol = max(opts.feas_tol, 1e-9)
    work: list[int] = []
    for k in np.flatnonzero(h - G @ x <= tol):
        cand = np.vstack([E, G[work + [int(k)]]])
        if np.linalg.matrix_rank(cand, tol=1e-9) == cand.shape[0]:
            work.append(int(k))

    for it in range(opts.max_iter):
        g = Q @ x + q
        C = np.vstack([E, G[work]])
        Z = _null_space(C, n)
        p = np.zeros(n)
        unbounded_dir = False
        if Z.shape[1]:
            H = Z.T @ Q @ Z
            r = Z.T @ g
            w, V = np.linalg.eigh(0.5 * (H + H.T))
            scale = max(1.0, np.abs(w).max(initial=0.0))
            flat = w <= 1e-10 * scale
            rk = V[:, flat].T @ r
            if flat.any() and np.linalg.norm(rk) > 1e-10 * max(1.0, np.linalg.norm(g)):
                p = -Z @ (V[:, flat] @ rk)
                unbounded_dir = True
            else:
                inv = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, w))
                p = -Z @ (V @ (inv * (V.T @ r)))
        if np.linalg.norm(p) <= 1e-11 * max(1.0, np.linalg.norm(x)):
            # multipliers: g + E'nu + G_W'lam = 0
            mult = np.linalg.lstsq(C.T, -g, rcond=None)[0] if C.shape[0] else np.zeros(0)
            lam = mult[E.shape[0]:]
            if not len(lam) or lam.min() >= -1e-9 * max(1.0, np.abs(g).max(initial=0.0)):
                return _finish(qp, x, g, mult, E.shape[0], eq_rows, work, tag, A, Q, q, const, it)
            work.pop(int(np.argmin(lam)))
            continue
        Gp = G @ p
        slack = h - G @ x
        alpha, block = (INF if unbounded_dir else 1.0), None
        for k in range(len(h)):
            if k in work or Gp[k] <= 1e-12:
                continue
            a = max(0.0, slack[k]) / Gp[k]
            if a < alpha:
                alpha, block = a, k
        if not np.isfinite(alpha):
            return Solution(status="unbounded", var_names=names, row_names=rnames, iterations=it)
        x = x + alpha * p
        if block is not None:
            work.append(block)
    raise IterationLimitError(f"active-set method hit {opts.max_iter} iterations")


def _finish(qp, x, g, mult, n_eq, eq_rows, work, tag, A, Q, q, const, it) -> Solution:
    n = qp.num_vars
    y = np.zeros(qp.num_rows)
    d = np.zeros(n)
    for k, src in enumerate(eq_rows):
        if isinstance(src, tuple):
            d[src[1]] += -mult[k]
        else:
            y[src] += -mult[k]
    for k, wk in enumerate(work):
        kind, i, sgn = tag[wk]
        val = -sgn * mult[n_eq + k]
        if kind == "row":
            y[i] += val
        else:
            d[i] += val
    return Solution(
        status="optimal",
        x=x,
        objective=float(0.5 * x @ Q @ x + q @ x + const),
        duals=y,
        reduced_costs=d,
        var_names=list(qp.var_names),
        row_names=list(qp.row_names),
        iterations=it,
    )

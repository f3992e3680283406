"""Dense bounded-variable simplex (primal two-phase and dual) with basis duals.

Rows are turned into equalities with one logical column per row,
``A x + s = b``, where the logical bounds encode the sense:
``<=`` gives s >= 0, ``>=`` gives s <= 0 and ``=`` fixes s = 0.
Nonbasic columns sit at a bound (or at zero when free).

Pricing uses the most negative reduced cost and switches to Bland's
lowest-index rule after a run of degenerate pivots, which rules out cycling.
Ties in the ratio test always go to the lowest column index so that results
are deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import INF, IterationLimitError, LinearProgram, SolverOptions, Solution, ValidationError

_DEGENERATE_SWITCH = 30


@dataclass
class Basis:
    """Warm-start information: basic columns and nonbasic positions."""

    basic: np.ndarray
    x: np.ndarray  # values of all structural + logical columns
    Binv: np.ndarray | None = None  # inverse of the basis matrix, when kept

    def stripped(self) -> "Basis":
        return Basis(self.basic, self.x) if self.Binv is not None else self


class _Tableau:
    def __init__(self, A, b, c, lo, hi, opts: SolverOptions, M=None):
        m, n = A.shape
        self.m, self.n = m, n
        self.opts = opts
        self.M = np.hstack([A, np.eye(m)]) if M is None else M
        self.b = b.astype(float)
        self.c = np.concatenate([c, np.zeros(m)])
        self.lo = lo.astype(float)
        self.hi = hi.astype(float)
        self.x = np.zeros(n + m)
        self.basic = np.arange(n, n + m)
        self.is_basic = np.zeros(n + m, dtype=bool)
        self.is_basic[self.basic] = True
        self.Binv = np.eye(m)
        self.iterations = 0
        self.since_refactor = 0
        self.deadline = None if opts.time_limit is None else time.perf_counter() + opts.time_limit

    # helpers -------------------------------------------------------------
    def add_columns(self, cols: np.ndarray, cost: np.ndarray, lo, hi):
        k = cols.shape[1]
        self.M = np.hstack([self.M, cols])
        self.c = np.concatenate([self.c, cost])
        self.lo = np.concatenate([self.lo, lo])
        self.hi = np.concatenate([self.hi, hi])
        self.x = np.concatenate([self.x, np.zeros(k)])
        self.is_basic = np.concatenate([self.is_basic, np.zeros(k, dtype=bool)])

    def refactor(self):
        B = self.M[:, self.basic]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise ValidationError("singular basis encountered") from exc
        self.since_refactor = 0
        self.recompute_xb()

    def recompute_xb(self):
        xn = self.x.copy()
        xn[self.basic] = 0.0
        self.x[self.basic] = self.Binv @ (self.b - self.M @ xn)

    def tick(self):
        self.iterations += 1
        self.since_refactor += 1
        if self.iterations > self.opts.max_iter:
            raise IterationLimitError(f"simplex iteration limit {self.opts.max_iter} exceeded")
        if self.deadline is not None and time.perf_counter() > self.deadline:
            raise IterationLimitError("simplex time limit exceeded")
        if self.since_refactor >= self.opts.refactor_every:
            self.refactor()

    def pivot(self, r: int, j: int, alpha: np.ndarray):
        piv = alpha[r]
        row = self.Binv[r] / piv
        self.Binv -= np.outer(alpha, row)
        self.Binv[r] = row
        leaving = self.basic[r]
        self.is_basic[leaving] = False
        self.is_basic[j] = True
        self.basic[r] = j

    # primal simplex ------------------------------------------------------
    def primal(self, cost: np.ndarray) -> str:
        tol_d = self.opts.opt_tol
        tol_p = self.opts.feas_tol
        degenerate = 0
        while True:
            y = cost[self.basic] @ self.Binv
            d = cost - y @ self.M
            movable_up = (~self.is_basic) & (self.x < self.hi - tol_p)
            movable_dn = (~self.is_basic) & (self.x > self.lo + tol_p)
            cand_up = movable_up & (d < -tol_d)
            cand_dn = movable_dn & (d > tol_d)
            cand = cand_up | cand_dn
            if not cand.any():
                return "optimal"
            idx = np.flatnonzero(cand)
            if degenerate >= _DEGENERATE_SWITCH:
                j = int(idx[0])
            else:
                j = int(idx[np.argmax(np.abs(d[idx]))])
            direction = 1.0 if cand_up[j] else -1.0
            alpha = self.Binv @ self.M[:, j]
            a = direction * alpha  # basic vars move by -t * a
            xb = self.x[self.basic]
            lob = self.lo[self.basic]
            hib = self.hi[self.basic]
            t_best = self.hi[j] - self.lo[j]
            r_best = -1
            piv_tol = 1e-9
            with np.errstate(divide="ignore", invalid="ignore"):
                t_dec = np.where(a > piv_tol, (xb - lob) / a, INF)
                t_inc = np.where(a < -piv_tol, (hib - xb) / (-a), INF)
            t_all = np.minimum(t_dec, t_inc)
            t_all = np.maximum(t_all, 0.0)
            tmin = t_all.min() if self.m else INF
            if tmin < t_best - 1e-12:
                ties = np.flatnonzero(t_all <= tmin + 1e-12)
                if len(ties) > 1:
                    # prefer the largest pivot among near ties, then lowest index
                    mags = np.abs(a[ties])
                    good = ties[mags >= 0.1 * mags.max()]
                    r_best = int(good[np.argmin(self.basic[good])])
                else:
                    r_best = int(ties[0])
                t_best = t_all[r_best]
            if not np.isfinite(t_best):
                return "unbounded"
            degenerate = degenerate + 1 if t_best <= 1e-12 else 0
            self.x[self.basic] = xb - t_best * a
            self.x[j] += direction * t_best
            if r_best >= 0:
                leaving = self.basic[r_best]
                # snap the leaving variable to the bound it hit
                if a[r_best] > 0:
                    self.x[leaving] = self.lo[leaving]
                else:
                    self.x[leaving] = self.hi[leaving]
                self.pivot(r_best, j, alpha)
            self.tick()

    # dual simplex --------------------------------------------------------
    def dual_feasible(self, cost: np.ndarray) -> bool:
        tol = 1e-7
        y = cost[self.basic] @ self.Binv
        d = cost - y @ self.M
        nb = ~self.is_basic
        fixed = self.lo >= self.hi
        at_lo = nb & ~fixed & np.isclose(self.x, self.lo, atol=1e-9)
        at_hi = nb & ~fixed & np.isclose(self.x, self.hi, atol=1e-9)
        free = nb & ~fixed & ~at_lo & ~at_hi
        bad = (at_lo & ~at_hi & (d < -tol)) | (at_hi & ~at_lo & (d > tol)) | (free & (np.abs(d) > tol))
        return not bad.any()

    def dual(self, cost: np.ndarray) -> str:
        tol_p = self.opts.feas_tol
        degenerate = 0
        while True:
            xb = self.x[self.basic]
            lob = self.lo[self.basic]
            hib = self.hi[self.basic]
            below = lob - xb
            above = xb - hib
            infeas = np.maximum(below, above)
            if self.m == 0 or infeas.max() <= tol_p:
                return "optimal"
            rows = np.flatnonzero(infeas > tol_p)
            if degenerate >= _DEGENERATE_SWITCH:
                r = int(rows[np.argmin(self.basic[rows])])
            else:
                r = int(rows[np.argmax(infeas[rows])])
            leaving = self.basic[r]
            going_up = below[r] > tol_p  # leaving variable must increase to its lower bound
            y = cost[self.basic] @ self.Binv
            d = cost - y @ self.M
            rho = self.Binv[r]
            alpha_r = rho @ self.M
            nb = (~self.is_basic) & (self.lo < self.hi)
            can_up = nb & (self.x < self.hi - 1e-9)
            can_dn = nb & (self.x > self.lo + 1e-9)
            piv_tol = 1e-9
            # x_leaving changes by -alpha_r[j] * dx_j
            if going_up:
                elig = (can_up & (alpha_r < -piv_tol)) | (can_dn & (alpha_r > piv_tol))
            else:
                elig = (can_up & (alpha_r > piv_tol)) | (can_dn & (alpha_r < -piv_tol))
            idx = np.flatnonzero(elig)
            if len(idx) == 0:
                return "infeasible"
            ratios = np.abs(d[idx]) / np.abs(alpha_r[idx])
            rmin = ratios.min()
            ties = idx[ratios <= rmin + 1e-12]
            if len(ties) > 1:
                mags = np.abs(alpha_r[ties])
                ties = ties[mags >= 0.1 * mags.max()]
            j = int(ties[0])
            degenerate = degenerate + 1 if rmin <= 1e-12 else 0
            alpha = self.Binv @ self.M[:, j]
            target = self.lo[leaving] if going_up else self.hi[leaving]
            dxj = (self.x[leaving] - target) / alpha[r]
            self.x[self.basic] -= dxj * alpha
            self.x[j] += dxj
            self.x[leaving] = target
            self.pivot(r, j, alpha)
            self.tick()


def _standardize(lp: LinearProgram):
    c, A, senses, b, lb, ub = lp.dense()
    m = len(senses)
    slo = np.zeros(m)
    shi = np.zeros(m)
    for i, s in enumerate(senses):
        if s == "<=":
            shi[i] = INF
        elif s == ">=":
            slo[i] = -INF
    return c, A, b, np.concatenate([lb, slo]), np.concatenate([ub, shi])


def _initial_values(lo, hi):
    x = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
    return x


@dataclass
class DenseForm:
    """Cached numpy view of an LP in minimization form with logical columns."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_lp(cls, lp: LinearProgram) -> "DenseForm":
        return cls(*_standardize(lp))

    @property
    def M(self) -> np.ndarray:
        """Structural and logical columns side by side (cached, read only)."""
        if getattr(self, "_M", None) is None:
            self._M = np.hstack([self.A, np.eye(self.A.shape[0])])
            self._M.flags.writeable = False
        return self._M


@dataclass
class DenseResult:
    status: str
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    d: np.ndarray | None = None
    basis: Basis | None = None
    iterations: int = 0


def _result(T: _Tableau, status: str, refactor: bool = True, keep_inverse: bool = False) -> DenseResult:
    if status != "optimal":
        return DenseResult(status, iterations=T.iterations)
    n, m = T.n, T.m
    if refactor:
        T.refactor()
    x = np.minimum(np.maximum(T.x[:n], T.lo[:n]), T.hi[:n])
    y = T.c[T.basic] @ T.Binv
    d = T.c[:n] - y @ T.M[:, :n]
    basis = None
    if not np.any(T.basic >= n + m):
        basis = Basis(T.basic.copy(), T.x[: n + m].copy(), T.Binv if keep_inverse else None)
    return DenseResult("optimal", x, y, d, basis, T.iterations)


def solve_dense(
    form: DenseForm,
    opts: SolverOptions | None = None,
    warm: Basis | None = None,
    lo: np.ndarray | None = None,
    hi: np.ndarray | None = None,
    keep_inverse: bool = False,
) -> DenseResult:
    """Solve min c'x, Ax + s = b, lo <= (x, s) <= hi; optional bound overrides.

    With ``keep_inverse`` the returned basis carries its inverse so that a
    warm start from it needs no refactorization.
    """
    opts = opts or SolverOptions()
    c, A, b = form.c, form.A, form.b
    lo = form.lo if lo is None else lo
    hi = form.hi if hi is None else hi
    m, n = A.shape
    if np.any(lo > hi + 1e-12):
        return DenseResult("infeasible")
    if warm is not None and len(warm.basic) == m and len(warm.x) == n + m:
        T = _Tableau(A, b, c, lo, hi, opts, form.M)
        T.basic = warm.basic.copy()
        T.is_basic[:] = False
        T.is_basic[T.basic] = True
        x = warm.x.copy()
        nb = ~T.is_basic
        x[nb] = np.clip(x[nb], lo[nb], hi[nb])
        free_nb = nb & ~np.isfinite(lo) & ~np.isfinite(hi)
        x[free_nb] = 0.0
        T.x = x
        try:
            if warm.Binv is not None:
                T.Binv = warm.Binv.copy()
                T.recompute_xb()
            else:
                T.refactor()
            ok = bool(np.all(np.isfinite(T.x)))
        except ValidationError:
            ok = False
        if ok and T.dual_feasible(T.c):
            status = T.dual(T.c)
            if status == "optimal":
                status = T.primal(T.c)
            return _result(T, status, refactor=not keep_inverse, keep_inverse=keep_inverse)
    return _cold(form, opts, lo, hi, keep_inverse)


def _cold(form: DenseForm, opts: SolverOptions, lo: np.ndarray, hi: np.ndarray, keep_inverse=False) -> DenseResult:
    c, A, b = form.c, form.A, form.b
    m, n = A.shape
    T = _Tableau(A, b, c, lo, hi, opts)
    T.x[:n] = _initial_values(lo[:n], hi[:n])
    resid = b - A @ T.x[:n]
    slo, shi = lo[n:], hi[n:]
    sval = np.clip(resid, slo, shi)
    art_rows = np.flatnonzero(np.abs(sval - resid) > 0)
    T.x[n:] = sval
    if len(art_rows):
        k = len(art_rows)
        cols = np.zeros((m, k))
        cols[art_rows, np.arange(k)] = np.sign(resid[art_rows] - sval[art_rows])
        T.add_columns(cols, np.zeros(k), np.zeros(k), np.full(k, INF))
        art = np.arange(n + m, n + m + k)
        T.basic[art_rows] = art
        T.is_basic[n + art_rows] = False
        T.is_basic[art] = True
        T.x[art] = np.abs(resid[art_rows] - sval[art_rows])
        T.refactor()
        phase1 = np.zeros(n + m + k)
        phase1[art] = 1.0
        status = T.primal(phase1)
        infeas = float(T.x[art].sum())
        if status != "optimal" or infeas > opts.feas_tol * max(1.0, np.abs(b).max(initial=1.0)):
            return DenseResult("infeasible", iterations=T.iterations)
        for r in range(m):
            jb = T.basic[r]
            if jb < n + m:
                continue
            rowv = T.Binv[r] @ T.M[:, : n + m]
            cand = np.flatnonzero((~T.is_basic[: n + m]) & (np.abs(rowv) > 1e-7))
            if len(cand):
                j = int(cand[np.argmax(np.abs(rowv[cand]))])
                alpha = T.Binv @ T.M[:, j]
                T.x[jb] = 0.0
                T.pivot(r, j, alpha)
        T.hi[art] = 0.0
        T.x[art] = 0.0
        T.refactor()
    status = T.primal(T.c)
    return _result(T, status, keep_inverse=keep_inverse)


def solve_lp(lp: LinearProgram, opts: SolverOptions | None = None, warm: Basis | None = None) -> Solution:
    """Solve an LP; duals satisfy c = A'y + reduced costs in the LP's own sense."""
    res = solve_dense(DenseForm.from_lp(lp), opts, warm)
    return to_solution(lp, res)


def to_solution(lp: LinearProgram, res: DenseResult) -> Solution:
    names, rnames = list(lp.var_names), list(lp.row_names)
    if res.status != "optimal":
        return Solution(status=res.status, var_names=names, row_names=rnames, iterations=res.iterations)
    sign = -1.0 if lp.sense == "max" else 1.0
    n = lp.num_vars
    x = res.x[:n]
    return Solution(
        status="optimal",
        x=x,
        objective=lp.objective_value(x),
        duals=sign * res.y,
        reduced_costs=sign * res.d,
        var_names=names,
        row_names=rnames,
        iterations=res.iterations,
        basis=res.basis,
    )


def dual_objective(lp: LinearProgram, sol: Solution) -> float:
    """Dual objective b'y plus the bound terms of the reduced costs."""
    val = float(np.dot(lp.rhs, sol.duals)) + lp.obj_const
    lb = np.asarray(lp.lb)
    ub = np.asarray(lp.ub)
    d = sol.reduced_costs
    sgn = 1.0 if lp.sense == "min" else -1.0
    for j, dj in enumerate(d):
        if abs(dj) <= 1e-12:
            continue
        if sgn * dj > 0:
            val += dj * lb[j]
        else:
            val += dj * ub[j]
    return val

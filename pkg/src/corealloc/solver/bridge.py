"""File-based bridge to an external MILP solver.

Problems are written in the CPLEX LP text format and solutions are read back
as ``name value`` lines.  Complementarity pairs are written with their big-M
disjunction since the LP format has no native pair type.  Solving through
the bridge needs the optional ``highspy`` package.
"""

from __future__ import annotations

import math
import re
import tempfile
from pathlib import Path

import numpy as np

from .milp import encode_big_m
from .model import INF, ConfigurationError, LinearProgram, MixedIntegerProgram, Solution, SolverOptions

_SAFE = re.compile(r"[A-Za-z0-9_.]")


class ParseError(ValueError):
    """A solution file line could not be read."""


def escape_name(name: str) -> str:
    """Map an arbitrary name to an LP-format identifier, reversibly."""
    out = ["x_"]
    for ch in name:
        if _SAFE.fullmatch(ch) and ch != "_":
            out.append(ch)
        elif ch == "_":
            out.append("__")
        else:
            out.append("_" + "".join(f"{b:02x}" for b in ch.encode()) + "_")
    return "".join(out)


def unescape_name(token: str) -> str:
    if not token.startswith("x_"):
        raise ValueError(f"not an exported name: {token!r}")
    s = token[2:]
    out = bytearray()
    i = 0
    while i < len(s):
        ch = s[i]
        if ch != "_":
            out += ch.encode()
            i += 1
        elif s.startswith("__", i):
            out += b"_"
            i += 2
        else:
            j = s.index("_", i + 1)
            out += bytes.fromhex(s[i + 1 : j])
            i = j + 1
    return out.decode()


def _num(v: float) -> str:
    return repr(float(v))


def _terms(coeffs, names) -> str:
    parts = []
    for j, a in sorted(coeffs.items()):
        if a == 0:
            continue
        sgn = "-" if a < 0 else "+"
        parts.append(f"{sgn} {_num(abs(a))} {names[j]}")
    if not parts:
        return "0 " + names[0] if names else "0"
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else s


def export_problem(mip: LinearProgram, path: str | Path) -> Path:
    """Write ``mip`` in CPLEX LP format; pairs become big-M binaries."""
    if isinstance(mip, MixedIntegerProgram) and mip.pairs:
        mip = encode_big_m(mip)
    names = [escape_name(n) for n in mip.var_names]
    lines = [f"\\ {mip.name}", "Minimize" if mip.sense == "min" else "Maximize"]
    obj = {j: a for j, a in enumerate(mip.obj) if a}
    lines.append(" obj: " + (_terms(obj, names) if obj else f"0 {names[0]}"))
    if mip.obj_const:
        lines[-1] += f" + {_num(mip.obj_const)} x___const"
    lines.append("Subject To")
    op = {"<=": "<=", ">=": ">=", "=": "="}
    for i, row in enumerate(mip.rows):
        body = _terms(row, names) if row else f"0 {names[0]}"
        lines.append(f" {escape_name(mip.row_names[i])}: {body} {op[mip.row_senses[i]]} {_num(mip.rhs[i])}")
    lines.append("Bounds")
    for j, n in enumerate(names):
        lo, hi = mip.lb[j], mip.ub[j]
        if lo == -INF and hi == INF:
            lines.append(f" {n} free")
        else:
            los = "-inf" if lo == -INF else _num(lo)
            his = "+inf" if hi == INF else _num(hi)
            lines.append(f" {los} <= {n} <= {his}")
    if mip.obj_const:
        lines.append(" x___const = 1")
    ints = sorted(getattr(mip, "integers", ()))
    if ints:
        lines.append("Binaries" if all(mip.lb[j] == 0 and mip.ub[j] == 1 for j in ints) else "Generals")
        lines.extend(f" {names[j]}" for j in ints)
    lines.append("End")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_solution(path: str | Path, values: dict[str, float]) -> Path:
    path = Path(path)
    path.write_text("".join(f"{escape_name(k)} {_num(v)}\n" for k, v in values.items()))
    return path


def import_solution(path: str | Path, lp: LinearProgram | None = None) -> Solution:
    """Read ``name value`` lines.  Blank lines and ``#`` comments are skipped."""
    values: dict[str, float] = {}
    for k, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"{path}: line {k}: expected 'name value', got {raw!r}")
        try:
            name = unescape_name(parts[0])
            val = float(parts[1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {k}: {exc}") from None
        if not math.isfinite(val):
            raise ParseError(f"{path}: line {k}: non-finite value")
        values[name] = val
    if lp is None:
        return Solution(status="optimal", x=np.array(list(values.values())), var_names=list(values))
    missing = [n for n in lp.var_names if n not in values]
    if missing:
        raise ParseError(f"{path}: no value for variable {missing[0]!r}")
    x = np.array([values[n] for n in lp.var_names])
    return Solution(status="optimal", x=x, objective=lp.objective_value(x), var_names=list(lp.var_names))


def solve_external(mip: LinearProgram, opts: SolverOptions | None = None, workdir: str | Path | None = None) -> Solution:
    """Export, solve with HiGHS from the file, and import the values by name."""
    try:
        import highspy
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise ConfigurationError("the bridge needs the optional highspy package") from exc
    opts = opts or SolverOptions()
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        lp_path = export_problem(mip, Path(tmp) / "problem.lp")
        h = highspy.Highs()
        h.setOptionValue("output_flag", bool(opts.log))
        h.setOptionValue("mip_rel_gap", opts.gap_tol)
        h.setOptionValue("primal_feasibility_tolerance", opts.feas_tol)
        if opts.time_limit is not None:
            h.setOptionValue("time_limit", float(opts.time_limit))
        h.readModel(str(lp_path))
        h.run()
        status = h.modelStatusToString(h.getModelStatus()).lower()
        if "infeasible" in status:
            return Solution(status="infeasible", var_names=list(mip.var_names))
        if "unbounded" in status:
            return Solution(status="unbounded", var_names=list(mip.var_names))
        if status != "optimal":
            raise ConfigurationError(f"external solver stopped with status {status!r}")
        lp = h.getLp()
        col = list(h.getSolution().col_value)
        sol_path = Path(tmp) / "solution.txt"
        sol_path.write_text("".join(f"{n} {_num(v)}\n" for n, v in zip(lp.col_names_, col)))
        sol = import_solution(sol_path, mip)
        info = h.getInfo()
        sol.nodes = int(getattr(info, "mip_node_count", 0) or 0)
        gap = getattr(info, "mip_gap", 0.0)
        sol.gap = float(gap) if gap is not None and np.isfinite(gap) else 0.0
        return sol

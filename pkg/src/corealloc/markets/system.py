"""Multi-area power system data for the reserve, day-ahead and balancing floors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..schemas import validate


@dataclass
class SystemData:
    areas: list[str]
    nodes: list[str]
    node_area: np.ndarray
    demand: np.ndarray
    lines: list[str]
    line_from: np.ndarray
    line_to: np.ndarray
    susceptance: np.ndarray
    line_cap: np.ndarray
    links: list[str]
    link_lines: list[list[int]]
    H: np.ndarray  # links x areas, entries in {-1, 0, 1}
    gens: list[str]
    gen_node: np.ndarray
    gen_cap: np.ndarray
    offer: np.ndarray
    up_offer: np.ndarray
    down_offer: np.ndarray
    up_cap: np.ndarray
    down_cap: np.ndarray
    flexible: np.ndarray
    winds: list[str]
    wind_node: np.ndarray
    wind_expected: np.ndarray
    wind_offer: np.ndarray
    scenarios: list[str]
    prob: np.ndarray
    wind_scen: np.ndarray  # scenarios x winds
    shed_cost: float = 1000.0
    req_up: np.ndarray | None = None
    req_down: np.ndarray | None = None
    currency: str = "EUR"
    name: str = "system"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.req_up is None or self.req_down is None:
            up, dn = compute_requirements(self)
            self.req_up = up if self.req_up is None else self.req_up
            self.req_down = dn if self.req_down is None else self.req_down
        self.check()

    # derived -------------------------------------------------------------
    @property
    def incidence(self) -> np.ndarray:
        A = np.zeros((len(self.lines), len(self.nodes)))
        A[np.arange(len(self.lines)), self.line_from] = 1.0
        A[np.arange(len(self.lines)), self.line_to] = -1.0
        return A

    @property
    def line_link(self) -> np.ndarray:
        out = np.full(len(self.lines), -1)
        for e, ls in enumerate(self.link_lines):
            out[ls] = e
        return out

    @property
    def link_cap(self) -> np.ndarray:
        return np.array([self.line_cap[ls].sum() for ls in self.link_lines])

    @property
    def gen_area(self) -> np.ndarray:
        return self.node_area[self.gen_node]

    @property
    def wind_area(self) -> np.ndarray:
        return self.node_area[self.wind_node]

    def line_areas(self, l: int) -> tuple[int, int]:
        return int(self.node_area[self.line_from[l]]), int(self.node_area[self.line_to[l]])

    def check(self):
        if not np.all(np.abs(self.H.sum(axis=1)) < 1e-12) and len(self.links):
            raise ValueError("each link must have incidence summing to zero over areas")
        if len(self.prob) and abs(self.prob.sum() - 1.0) > 1e-9:
            raise ValueError("scenario probabilities must sum to one")
        if np.any(self.prob < 0):
            raise ValueError("scenario probabilities must be nonnegative")
        ll = self.line_link
        for l in range(len(self.lines)):
            a, b = self.line_areas(l)
            if a != b and ll[l] < 0:
                raise ValueError(f"tie-line {self.lines[l]} is not assigned to a link")
            if a == b and ll[l] >= 0:
                raise ValueError(f"intra-area line {self.lines[l]} is assigned to a link")
            if ll[l] >= 0:
                e = ll[l]
                if self.H[e, a] == 0 or self.H[e, b] == 0:
                    raise ValueError(f"line {self.lines[l]} joins areas outside link {self.links[e]}")

    def with_scenarios(self, prob, wind_scen, names=None, expected=None) -> "SystemData":
        prob = np.asarray(prob, float)
        wind_scen = np.atleast_2d(np.asarray(wind_scen, float))
        names = list(names) if names is not None else [f"s{k + 1}" for k in range(len(prob))]
        exp = prob @ wind_scen if expected is None else np.asarray(expected, float)
        return replace(self, scenarios=names, prob=prob, wind_scen=wind_scen, wind_expected=exp)

    def link_lines_mask(self, links: Sequence[int]) -> np.ndarray:
        mask = np.zeros(len(self.lines), dtype=bool)
        for e in links:
            mask[self.link_lines[e]] = True
        return mask


def compute_requirements(sys: SystemData) -> tuple[np.ndarray, np.ndarray]:
    """Per-area reserve needs covering the largest shortfall and surplus of wind."""
    na = len(sys.areas)
    up = np.zeros(na)
    dn = np.zeros(na)
    if len(sys.winds) == 0 or len(sys.scenarios) == 0:
        return up, dn
    area = sys.node_area[sys.wind_node]
    for a in range(na):
        js = np.flatnonzero(area == a)
        if len(js) == 0:
            continue
        total = sys.wind_scen[:, js].sum(axis=1)
        mean = sys.wind_expected[js].sum()
        up[a] = max(0.0, mean - total.min())
        dn[a] = max(0.0, total.max() - mean)
    return _clean(up), _clean(dn)


def _clean(v: np.ndarray) -> np.ndarray:
    # strip representation noise from sums such as 70.4 - 64
    return np.round(v, 9)


# JSON -------------------------------------------------------------------------


def load_system(system_path: str | Path, scenarios_path: str | Path | None = None) -> SystemData:
    doc = json.loads(Path(system_path).read_text())
    scen = None
    if scenarios_path is not None:
        scen = json.loads(Path(scenarios_path).read_text())
    return system_from_dict(doc, scen)


def system_from_dict(doc: dict, scen: dict | None = None) -> SystemData:
    validate(doc, "system")
    if scen is not None:
        validate(scen, "scenarios")
    areas = list(doc["areas"])
    aidx = {a: k for k, a in enumerate(areas)}
    nodes = [n["id"] for n in doc["nodes"]]
    nidx = {n: k for k, n in enumerate(nodes)}
    node_area = np.array([aidx[n["area"]] for n in doc["nodes"]])
    demand = np.array([float(n.get("demand", 0.0)) for n in doc["nodes"]])
    lines = [l["id"] for l in doc["lines"]]
    lidx = {l: k for k, l in enumerate(lines)}
    lf = np.array([nidx[l["from"]] for l in doc["lines"]], dtype=int)
    lt = np.array([nidx[l["to"]] for l in doc["lines"]], dtype=int)
    sus = np.array([1.0 / float(l["reactance"]) for l in doc["lines"]])
    cap = np.array([float(l["capacity"]) for l in doc["lines"]])
    links = [e["id"] for e in doc.get("links", [])]
    link_lines = [[lidx[l] for l in e["lines"]] for e in doc.get("links", [])]
    H = np.zeros((len(links), len(areas)))
    for k, e in enumerate(doc.get("links", [])):
        for a, v in e["incidence"].items():
            H[k, aidx[a]] = v
    g = doc["generators"]
    gens = [x["id"] for x in g]
    flexible = np.array([bool(x.get("flexible", True)) for x in g])
    up_cap = np.array([float(x.get("reserve_up_cap", 0.0)) for x in g]) * flexible
    dn_cap = np.array([float(x.get("reserve_down_cap", 0.0)) for x in g]) * flexible
    w = doc.get("wind", [])
    winds = [x["id"] for x in w]
    widx = {j: k for k, j in enumerate(winds)}
    if scen is None:
        scen = {"scenarios": [{"id": "s1", "probability": 1.0, "wind": {j: float(x["capacity"]) for j, x in zip(winds, w)}}]}
    names = [s["id"] for s in scen["scenarios"]]
    prob = np.array([float(s["probability"]) for s in scen["scenarios"]])
    W = np.zeros((len(names), len(winds)))
    for k, s in enumerate(scen["scenarios"]):
        for j, v in s["wind"].items():
            W[k, widx[j]] = float(v)
    if "expected" in scen:
        expected = np.array([float(scen["expected"][j]) for j in winds])
    else:
        expected = prob @ W if len(names) else np.zeros(len(winds))
    req = doc.get("requirements")
    req_up = req_dn = None
    if req is not None:
        req_up = np.array([float(req["up"][a]) for a in areas])
        req_dn = np.array([float(req["down"][a]) for a in areas])
    return SystemData(
        areas=areas,
        nodes=nodes,
        node_area=node_area,
        demand=demand,
        lines=lines,
        line_from=lf,
        line_to=lt,
        susceptance=sus,
        line_cap=cap,
        links=links,
        link_lines=link_lines,
        H=H,
        gens=gens,
        gen_node=np.array([nidx[x["node"]] for x in g], dtype=int),
        gen_cap=np.array([float(x["capacity"]) for x in g]),
        offer=np.array([float(x["offer"]) for x in g]),
        up_offer=np.array([float(x.get("reserve_up_offer", 0.0)) for x in g]),
        down_offer=np.array([float(x.get("reserve_down_offer", 0.0)) for x in g]),
        up_cap=up_cap,
        down_cap=dn_cap,
        flexible=flexible,
        winds=winds,
        wind_node=np.array([nidx[x["node"]] for x in w], dtype=int),
        wind_expected=expected,
        wind_offer=np.array([float(x.get("offer", 0.0)) for x in w]),
        scenarios=names,
        prob=prob,
        wind_scen=W,
        shed_cost=float(doc.get("shed_cost", 1000.0)),
        req_up=req_up,
        req_down=req_dn,
        currency=doc.get("currency", "EUR"),
        name=doc.get("name", "system"),
    )


def load_shares(path: str | Path, sys: SystemData) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    validate(doc, "shares")
    chi = np.zeros(len(sys.links))
    for e, v in doc["chi"].items():
        if e not in sys.links:
            raise ValueError(f"shares file names unknown link {e!r}")
        chi[sys.links.index(e)] = float(v)
    if np.any(chi < 0) or np.any(chi > 1):
        raise ValueError("transmission shares must lie in [0, 1]")
    return chi


def with_scenarios(sys: SystemData, scen: dict) -> SystemData:
    """Replace the realizations while keeping requirements and expected wind.

    Reserve and day-ahead clearings are then identical to ``sys``, so the
    new scenarios are evaluated out of sample.
    """
    validate(scen, "scenarios")
    widx = {j: k for k, j in enumerate(sys.winds)}
    names = [s["id"] for s in scen["scenarios"]]
    W = np.zeros((len(names), len(sys.winds)))
    for k, s in enumerate(scen["scenarios"]):
        for j, v in s["wind"].items():
            if j not in widx:
                raise ValueError(f"scenario {s['id']}: unknown wind plant {j!r}")
            W[k, widx[j]] = float(v)
    prob = np.array([float(s["probability"]) for s in scen["scenarios"]])
    return replace(
        sys, scenarios=names, prob=prob, wind_scen=W,
        req_up=sys.req_up.copy(), req_down=sys.req_down.copy(), wind_expected=sys.wind_expected.copy(),
    )

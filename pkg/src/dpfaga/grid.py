"""Bus-network model: case loading, validation, and Y-bus assembly.

All quantities are per-unit; angles are in radians. Case files use a small
JSON schema (see `load_case`). A converted IEEE 14-bus case ships with the
package as ``dpfaga/data/case14.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from importlib import resources

import numpy as np

SLACK = "slack"
PV = "pv"
PQ = "pq"
BUS_KINDS = (SLACK, PV, PQ)


class CaseParseError(ValueError):
    """Raised when a case file is not valid JSON or misses/misuses keys."""


class CaseValidationError(ValueError):
    """Raised when a parsed case violates a structural invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float
    q_load: float
    v_min: float = 0.94
    v_max: float = 1.06
    d_min: float = -math.pi
    d_max: float = math.pi
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_set: float


@dataclass(frozen=True)
class GridCase:
    """A validated network: buses, branches, generators, base MVA.

    Immutable after construction; safe to share across threads/processes.
    """

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == SLACK)

    def bus_kinds(self) -> np.ndarray:
        return np.array([b.kind for b in self.buses])

    def pv_indices(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind == PV], dtype=int)

    def pq_indices(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind == PQ], dtype=int)

    def base_p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses])

    def base_q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses])

    def v_setpoints(self) -> np.ndarray:
        """Scheduled |V| per bus: generator v_set at slack/PV buses, 1.0 at PQ."""
        v = np.ones(self.n_bus)
        for g in self.generators:
            v[g.bus] = g.v_set
        return v

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 bus adjacency over branches (no self-loops)."""
        a = np.zeros((self.n_bus, self.n_bus))
        for br in self.branches:
            a[br.from_bus, br.to_bus] = 1.0
            a[br.to_bus, br.from_bus] = 1.0
        return a


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense complex nodal admittance matrix (pu)."""

    n: int
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.y.flags.writeable = False


_BUS_KEYS = {"id", "kind", "p_load", "q_load", "v_min", "v_max", "d_min", "d_max", "shunt_g", "shunt_b"}
_BRANCH_KEYS = {"from", "to", "r", "x", "b", "tap"}
_GEN_KEYS = {"bus", "p_min", "p_max", "q_min", "q_max", "v_set"}
_TOP_KEYS = {"name", "base_mva", "buses", "branches", "generators"}


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    extra = set(obj) - allowed
    if extra:
        raise CaseParseError(f"unknown keys {sorted(extra)} in {where}")


def load_case(path) -> GridCase:
    """Load and validate a case from its JSON file.

    Top-level schema::

        {name, base_mva,
         buses:    [{id, kind, p_load, q_load, v_min, v_max, d_min, d_max, shunt_g, shunt_b}],
         branches: [{from, to, r, x, b, tap}],
         generators: [{bus, p_min, p_max, q_min, q_max, v_set}]}

    Numbers are per-unit, angles in radians; unknown keys are rejected.
    """
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseParseError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    return case_from_dict(raw, where=str(path))


def case_from_dict(raw: dict, where: str = "<dict>") -> GridCase:
    if not isinstance(raw, dict):
        raise CaseParseError(f"{where}: top level must be an object")
    _reject_unknown(raw, _TOP_KEYS, "top level")
    try:
        buses = []
        for b in raw["buses"]:
            _reject_unknown(b, _BUS_KEYS, f"bus {b.get('id', '?')}")
            kind = str(b["kind"]).lower()
            buses.append(Bus(
                id=int(b["id"]), kind=kind,
                p_load=float(b["p_load"]), q_load=float(b["q_load"]),
                v_min=float(b["v_min"]), v_max=float(b["v_max"]),
                d_min=float(b["d_min"]), d_max=float(b["d_max"]),
                shunt_g=float(b["shunt_g"]), shunt_b=float(b["shunt_b"]),
            ))
        branches = []
        for br in raw["branches"]:
            _reject_unknown(br, _BRANCH_KEYS, "branch")
            branches.append(Branch(
                from_bus=int(br["from"]), to_bus=int(br["to"]),
                r=float(br["r"]), x=float(br["x"]),
                b_charging=float(br["b"]), tap=float(br["tap"]),
            ))
        gens = []
        for g in raw["generators"]:
            _reject_unknown(g, _GEN_KEYS, "generator")
            gens.append(Generator(
                bus=int(g["bus"]),
                p_min=float(g["p_min"]), p_max=float(g["p_max"]),
                q_min=float(g["q_min"]), q_max=float(g["q_max"]),
                v_set=float(g["v_set"]),
            ))
        case = GridCase(
            name=str(raw["name"]), base_mva=float(raw["base_mva"]),
            buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
        )
    except KeyError as e:
        raise CaseParseError(f"{where}: missing key {e}") from e
    validate_case(case)
    return case


def case_to_dict(case: GridCase) -> dict:
    """Inverse of `case_from_dict`; full precision, round-trips losslessly."""
    d = asdict(case)
    for br in d["branches"]:
        br["from"] = br.pop("from_bus")
        br["to"] = br.pop("to_bus")
        br["b"] = br.pop("b_charging")
        # keep schema key order
    d["branches"] = [{k: br[k] for k in ("from", "to", "r", "x", "b", "tap")} for br in d["branches"]]
    d["buses"] = [{k: b[k] for k in ("id", "kind", "p_load", "q_load", "v_min", "v_max",
                                     "d_min", "d_max", "shunt_g", "shunt_b")} for b in d["buses"]]
    return {"name": d["name"], "base_mva": d["base_mva"], "buses": d["buses"],
            "branches": d["branches"], "generators": d["generators"]}


def save_case(case: GridCase, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(case_to_dict(case), f, indent=1)
        f.write("\n")


def validate_case(case: GridCase) -> None:
    """Check every structural invariant; raise CaseValidationError naming the first violation."""
    n = case.n_bus
    if n == 0:
        raise CaseValidationError("case has zero buses")
    ids = [b.id for b in case.buses]
    if ids != list(range(n)):
        raise CaseValidationError(f"bus ids must be the contiguous range 0..{n - 1}, got {ids}")
    slack_count = sum(1 for b in case.buses if b.kind == SLACK)
    if slack_count != 1:
        raise CaseValidationError(f"exactly one slack bus required, found {slack_count}"
                                  + (" (two slack buses)" if slack_count == 2 else ""))
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseValidationError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not (b.v_min < b.v_max) or not (math.isfinite(b.v_min) and math.isfinite(b.v_max)):
            raise CaseValidationError(f"bus {b.id}: require finite v_min < v_max")
        if not (b.d_min < b.d_max) or not (math.isfinite(b.d_min) and math.isfinite(b.d_max)):
            raise CaseValidationError(f"bus {b.id}: require finite d_min < d_max")
    for br in case.branches:
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus}: from == to")
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus}: endpoint out of range")
        if br.r == 0.0 and br.x == 0.0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus}: zero series impedance")
        if br.tap == 0.0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus}: zero tap ratio")
    vset_at = {}
    for g in case.generators:
        if not (0 <= g.bus < n):
            raise CaseValidationError(f"generator at bus {g.bus}: bus does not exist")
        if case.buses[g.bus].kind == PQ:
            raise CaseValidationError(f"generator at bus {g.bus}: bus must be slack or PV")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseValidationError(f"generator at bus {g.bus}: min bound exceeds max bound")
        if g.bus in vset_at and vset_at[g.bus] != g.v_set:
            raise CaseValidationError(f"generator at bus {g.bus}: conflicting v_set values")
        vset_at[g.bus] = g.v_set
    for i, b in enumerate(case.buses):
        if b.kind in (SLACK, PV) and i not in vset_at:
            raise CaseValidationError(f"bus {i} is {b.kind} but has no generator (no v_set)")
    if not _connected(case):
        raise CaseValidationError("branch graph is not connected (>= 2 components)")


def _connected(case: GridCase) -> bool:
    n = case.n_bus
    nbrs = [[] for _ in range(n)]
    for br in case.branches:
        nbrs[br.from_bus].append(br.to_bus)
        nbrs[br.to_bus].append(br.from_bus)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in nbrs[i]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    return all(seen)


def build_ybus(case: GridCase) -> AdmittanceMatrix:
    """Assemble the dense complex Y-bus.

    Branch model: series admittance y = 1/(r + jx), total charging b split
    half per end, off-nominal tap on the from side. With real taps the
    matrix is symmetric; rows sum to the bus shunt when charging is zero.
    """
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_charging
        t = br.tap
        f, to = br.from_bus, br.to_bus
        y[f, f] += (ys + ysh) / (t * t)
        y[to, to] += ys + ysh
        y[f, to] += -ys / t
        y[to, f] += -ys / t
    for i, b in enumerate(case.buses):
        y[i, i] += complex(b.shunt_g, b.shunt_b)
    return AdmittanceMatrix(n=n, y=y)


def bundled_case_path(name: str = "case14") -> str:
    """Filesystem path of a case shipped in dpfaga/data."""
    return str(resources.files("dpfaga.data").joinpath(f"{name}.json"))


def load_bundled_case(name: str = "case14") -> GridCase:
    return load_case(bundled_case_path(name))

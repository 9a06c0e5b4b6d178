"""Radial network data model, JSON ingestion and per-unit conversion."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

__all__ = [
    "Bus",
    "Branch",
    "DerUnit",
    "GridModel",
    "NetworkError",
    "TopologyReport",
    "load_network",
    "load_network_file",
    "load_attached_grids",
    "serialize_network",
    "validate_radial",
]

_POWER_SCALE = {"W": 1e-6, "kW": 1e-3, "MW": 1.0}
_CURRENT_SCALE = {"A": 1.0, "kA": 1e3}


class NetworkError(ValueError):
    """Malformed or non-radial network document.

    ``element`` carries the id of the offending bus/branch/DER when known.
    """

    def __init__(self, message: str, element: str | None = None):
        super().__init__(message)
        self.element = element


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str  # "slack" | "pq"
    v_min: float
    v_max: float
    base_kv: float
    p_load: float = 0.0  # consumption, per-unit, >= 0 means drawing power
    q_load: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    r: float
    x: float
    i_max: float
    id: str = ""

    def __post_init__(self):
        if not self.id:
            object.__setattr__(self, "id", f"{self.from_bus}-{self.to_bus}")


@dataclass(frozen=True)
class DerUnit:
    bus: str
    p_max: float
    q_min: float
    q_max: float
    curtailable_fraction: float = 0.0
    id: str = ""
    # current output at the operating point; defaults to full capability
    p_set: float | None = None
    q_set: float = 0.0

    def __post_init__(self):
        if not self.id:
            object.__setattr__(self, "id", f"der@{self.bus}")
        if self.p_set is None:
            object.__setattr__(self, "p_set", self.p_max)


@dataclass(frozen=True)
class GridModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    ders: tuple[DerUnit, ...] = ()
    s_base: float = 1.0  # MVA
    attached_lv_grids: dict[str, str] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "ders", tuple(self.ders))
        _check_invariants(self)

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def branch_index(self) -> dict[str, int]:
        return {br.id: k for k, br in enumerate(self.branches)}

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    @property
    def branch_ids(self) -> list[str]:
        return [br.id for br in self.branches]

    @cached_property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    @cached_property
    def topology(self) -> "TopologyReport":
        return validate_radial(self)

    def ders_at(self, bus_id: str) -> list[DerUnit]:
        return [d for d in self.ders if d.bus == bus_id]

    def injections(self) -> dict[str, complex]:
        """Net per-unit injection per bus at the stored operating point
        (DER output minus load; generation positive)."""
        s = {b.id: complex(-b.p_load, -b.q_load) for b in self.buses}
        for d in self.ders:
            s[d.bus] += complex(d.p_set, d.q_set)
        return s


@dataclass(frozen=True)
class TopologyReport:
    order: list[str]  # root first, breadth-first
    parent_branch: dict[str, str]  # bus -> branch id feeding it
    parent_bus: dict[str, str]
    children: dict[str, list[str]]  # bus -> child buses
    depth: dict[str, int]

    def path_to_root(self, bus: str) -> list[str]:
        """Branch ids on the path from ``bus`` up to the slack."""
        path = []
        while bus in self.parent_branch:
            path.append(self.parent_branch[bus])
            bus = self.parent_bus[bus]
        return path

    def downstream(self, bus: str) -> list[str]:
        out, stack = [], [bus]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(self.children[k])
        return out


def _check_invariants(model: GridModel) -> None:
    seen = set()
    for b in model.buses:
        if b.id in seen:
            raise NetworkError(f"duplicate bus id {b.id!r}", b.id)
        seen.add(b.id)
        if b.kind not in ("slack", "pq"):
            raise NetworkError(f"bus {b.id!r}: unknown kind {b.kind!r}", b.id)
        if not (0 < b.v_min < b.v_max):
            raise NetworkError(f"bus {b.id!r}: need 0 < v_min < v_max", b.id)
        if b.base_kv <= 0:
            raise NetworkError(f"bus {b.id!r}: base_kv must be positive", b.id)
    slacks = [b.id for b in model.buses if b.kind == "slack"]
    if len(slacks) != 1:
        raise NetworkError(f"expected exactly one slack bus, found {len(slacks)}")
    seen_br = set()
    for br in model.branches:
        if br.id in seen_br:
            raise NetworkError(f"duplicate branch id {br.id!r}", br.id)
        seen_br.add(br.id)
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise NetworkError(f"branch {br.id!r} references unknown bus {end!r}", end)
        if br.from_bus == br.to_bus:
            raise NetworkError(f"branch {br.id!r} is a self-loop", br.id)
        if br.r < 0:
            raise NetworkError(f"branch {br.id!r}: negative resistance", br.id)
        if br.i_max <= 0:
            raise NetworkError(f"branch {br.id!r}: i_max must be positive", br.id)
    for d in model.ders:
        if d.bus not in seen:
            raise NetworkError(f"DER {d.id!r} references unknown bus {d.bus!r}", d.bus)
        if d.p_max < 0 or d.q_min > d.q_max:
            raise NetworkError(f"DER {d.id!r}: inconsistent capability", d.id)
        if not 0.0 <= d.curtailable_fraction <= 1.0:
            raise NetworkError(f"DER {d.id!r}: curtailable_fraction outside [0, 1]", d.id)
    for bus_id in model.attached_lv_grids:
        if bus_id not in seen:
            raise NetworkError(f"LV grid attached to unknown bus {bus_id!r}", bus_id)
    if len(model.branches) != len(model.buses) - 1:
        # find a branch closing a loop for the message
        culprit = _find_cycle_branch(model)
        if culprit is not None:
            raise NetworkError(
                f"network is not radial: branch {culprit!r} closes a loop", culprit
            )
        raise NetworkError("network is disconnected")
    validate_radial(model)


def _find_cycle_branch(model: GridModel) -> str | None:
    parent = {b.id: b.id for b in model.buses}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for br in model.branches:
        a, b = find(br.from_bus), find(br.to_bus)
        if a == b:
            return br.id
        parent[a] = b
    return None


def validate_radial(model: GridModel) -> TopologyReport:
    """Orient the tree from the slack bus and return a root-first ordering."""
    adj: dict[str, list[tuple[str, str]]] = {b.id: [] for b in model.buses}
    for br in model.branches:
        adj[br.from_bus].append((br.to_bus, br.id))
        adj[br.to_bus].append((br.from_bus, br.id))
    root = next(b.id for b in model.buses if b.kind == "slack")
    order, parent_branch, parent_bus = [root], {}, {}
    children: dict[str, list[str]] = {b.id: [] for b in model.buses}
    depth = {root: 0}
    queue = deque([root])
    while queue:
        k = queue.popleft()
        for nb, br_id in adj[k]:
            if br_id == parent_branch.get(k):
                continue
            if nb in depth:
                raise NetworkError(f"network is not radial: branch {br_id!r} closes a loop", br_id)
            depth[nb] = depth[k] + 1
            parent_branch[nb] = br_id
            parent_bus[nb] = k
            children[k].append(nb)
            order.append(nb)
            queue.append(nb)
    if len(order) != len(model.buses):
        missing = next(b.id for b in model.buses if b.id not in depth)
        raise NetworkError(f"network is disconnected: bus {missing!r} unreachable", missing)
    return TopologyReport(order, parent_branch, parent_bus, children, depth)


# -- serialization ---------------------------------------------------------


def _unit_scales(units, s_base):
    """Return (power, impedance(kv), current(kv)) converters physical -> pu."""
    if units == "pu" or units is None:
        return (lambda v: v), (lambda v, kv: v), (lambda v, kv: v)
    if not isinstance(units, dict):
        raise NetworkError(f"unsupported units header {units!r}")
    try:
        ps = _POWER_SCALE[units.get("power", "kW")]
        cs = _CURRENT_SCALE[units.get("current", "A")]
    except KeyError as exc:
        raise NetworkError(f"unsupported unit {exc.args[0]!r}") from None
    if units.get("impedance", "ohm") != "ohm":
        raise NetworkError(f"unsupported impedance unit {units['impedance']!r}")

    def power(v):
        return v * ps / s_base

    def impedance(v, kv):
        return v / (kv * kv / s_base)

    def current(v, kv):
        return v * cs / (s_base * 1e3 / (math.sqrt(3.0) * kv))

    return power, impedance, current


def load_network(text: str, name: str = "") -> GridModel:
    """Parse a network JSON document and convert to per-unit on ``s_base_mva``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"parse failure: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkError("parse failure: top level must be an object")
    try:
        s_base = float(doc["s_base_mva"])
        power, impedance, current = _unit_scales(doc.get("units", "pu"), s_base)
        buses = []
        for b in doc["buses"]:
            buses.append(
                Bus(
                    id=str(b["id"]),
                    kind=b.get("kind", "pq"),
                    v_min=float(b["v_min"]),
                    v_max=float(b["v_max"]),
                    base_kv=float(b["base_kv"]),
                    p_load=power(float(b.get("p_load", 0.0))),
                    q_load=power(float(b.get("q_load", 0.0))),
                )
            )
        kv = {b.id: b.base_kv for b in buses}
        branches = []
        for br in doc["branches"]:
            f, t = str(br["from_bus"]), str(br["to_bus"])
            for end in (f, t):
                if end not in kv:
                    raise NetworkError(
                        f"branch {br.get('id', f + '-' + t)!r} references unknown bus {end!r}", end
                    )
            base = kv[f]
            branches.append(
                Branch(
                    from_bus=f,
                    to_bus=t,
                    r=impedance(float(br["r"]), base),
                    x=impedance(float(br["x"]), base),
                    i_max=current(float(br["i_max"]), base),
                    id=str(br.get("id", "")),
                )
            )
        ders = []
        for d in doc.get("ders", []):
            p_set = d.get("p_set")
            ders.append(
                DerUnit(
                    bus=str(d["bus"]),
                    p_max=power(float(d["p_max"])),
                    q_min=power(float(d["q_min"])),
                    q_max=power(float(d["q_max"])),
                    curtailable_fraction=float(d.get("curtailable_fraction", 0.0)),
                    id=str(d.get("id", "")),
                    p_set=None if p_set is None else power(float(p_set)),
                    q_set=power(float(d.get("q_set", 0.0))),
                )
            )
        attached = {str(k): str(v) for k, v in doc.get("attached_lv_grids", {}).items()}
    except KeyError as exc:
        raise NetworkError(f"parse failure: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkError(f"parse failure: {exc}") from exc
    return GridModel(buses, branches, ders, s_base, attached, name or doc.get("name", ""))


def load_network_file(path: str | Path) -> GridModel:
    path = Path(path)
    return load_network(path.read_text(encoding="utf-8"), name=path.stem)


def load_attached_grids(model: GridModel, base_dir: str | Path) -> dict[str, GridModel]:
    """Resolve ``attached_lv_grids`` paths relative to ``base_dir``."""
    return {
        bus: load_network_file(Path(base_dir) / rel)
        for bus, rel in sorted(model.attached_lv_grids.items())
    }


def serialize_network(model: GridModel) -> str:
    """Per-unit JSON document; ``load_network`` on it reproduces ``model`` exactly."""
    doc = {
        "name": model.name,
        "units": "pu",
        "s_base_mva": model.s_base,
        "buses": [
            {
                "id": b.id,
                "kind": b.kind,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "base_kv": b.base_kv,
                "p_load": b.p_load,
                "q_load": b.q_load,
            }
            for b in model.buses
        ],
        "branches": [
            {"id": br.id, "from_bus": br.from_bus, "to_bus": br.to_bus,
             "r": br.r, "x": br.x, "i_max": br.i_max}
            for br in model.branches
        ],
        "ders": [
            {
                "id": d.id,
                "bus": d.bus,
                "p_max": d.p_max,
                "q_min": d.q_min,
                "q_max": d.q_max,
                "curtailable_fraction": d.curtailable_fraction,
                "p_set": d.p_set,
                "q_set": d.q_set,
            }
            for d in model.ders
        ],
        "attached_lv_grids": dict(model.attached_lv_grids),
    }
    return json.dumps(doc, indent=2)

"""Aggregate P-Q flexibility area at an MV/LV transformer.

For each search direction an LP over the DER setpoint changes maximises the
weighted change of transformer transfer, with monitored voltages and
currents kept inside their limits through the linear sensitivity model.
The optima of all directions are hulled into a convex polygon.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .conic import ConicProgram, ProgramBuilder
from .geometry import convex_hull, halfplanes, intersect_halfplanes, polygon_area
from .grid import GridModel
from .powerflow import OperatingPoint, SensitivityMatrices
from .sensitivity import shifted_operating_point
from .uncertainty import UncertaintyModel

__all__ = [
    "DirectionWeights",
    "LvOpfProblem",
    "FlexibilityArea",
    "build_direction_lp",
    "solve_direction",
    "sweep_directions",
    "sweep_flexibility_area",
    "apply_worst_case_shift",
    "polygon_to_halfplanes",
    "robust_transfer_area",
    "der_bounds",
]


@dataclass(frozen=True)
class DirectionWeights:
    alpha_dir: float
    beta_dir: float

    def __post_init__(self):
        if self.alpha_dir == 0 and self.beta_dir == 0:
            raise ValueError("direction weights must not both be zero")

    @property
    def degrees(self) -> float:
        return math.degrees(math.atan2(self.beta_dir, self.alpha_dir)) % 360.0


@dataclass(frozen=True)
class LvOpfProblem:
    program: ConicProgram  # minimises the negated direction objective
    der_ids: list[str]
    p_row: np.ndarray  # transfer change d p_sl = p_row . x
    q_row: np.ndarray
    base_transfer: tuple[float, float]
    direction: DirectionWeights
    base_violations: list[str] = field(default_factory=list)

    @property
    def n_vars(self) -> int:
        return self.program.n


@dataclass(frozen=True)
class FlexibilityArea:
    vertices: np.ndarray  # (k, 2) counter-clockwise, pu on s_base
    base: tuple[float, float]
    half_planes: np.ndarray  # (m, 3) rows a*p + b*q <= c
    s_base: float = 1.0
    vertex_directions: tuple[float, ...] = ()  # NaN marks the base point
    vertex_setpoints: tuple[dict, ...] = ()  # der id -> (dP, dQ)
    diagnostics: tuple[str, ...] = ()

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    @property
    def degenerate(self) -> bool:
        return len(self.vertices) <= 2

    def contains(self, p: float, q: float, tol: float = 1e-9) -> bool:
        a = self.half_planes
        return bool(np.all(a[:, 0] * p + a[:, 1] * q <= a[:, 2] + tol))

    def relative_halfplanes(self) -> np.ndarray:
        """Half-planes on the deviation from this area's own base point."""
        hp = np.array(self.half_planes, dtype=float)
        hp[:, 2] = hp[:, 2] - hp[:, 0] * self.base[0] - hp[:, 1] * self.base[1]
        return hp

    def rescaled(self, s_base: float) -> "FlexibilityArea":
        """Same area expressed per-unit on another power base."""
        f = self.s_base / s_base
        hp = np.array(self.half_planes, dtype=float)
        hp[:, 2] *= f
        return FlexibilityArea(
            vertices=self.vertices * f,
            base=(self.base[0] * f, self.base[1] * f),
            half_planes=hp,
            s_base=s_base,
            vertex_directions=self.vertex_directions,
            vertex_setpoints=tuple(
                {k: (dp * f, dq * f) for k, (dp, dq) in s.items()} for s in self.vertex_setpoints
            ),
            diagnostics=self.diagnostics,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["direction_deg", "p_pu", "q_pu"])
        dirs = self.vertex_directions or (float("nan"),) * len(self.vertices)
        for d, (p, q) in zip(dirs, self.vertices):
            w.writerow([repr(float(d)), repr(float(p)), repr(float(q))])
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "s_base_mva": self.s_base,
            "base": [float(self.base[0]), float(self.base[1])],
            "vertices": [[float(p), float(q)] for p, q in self.vertices],
            "direction_deg": [None if math.isnan(d) else float(d) for d in self.vertex_directions],
            "half_planes": [[float(a), float(b), float(c)] for a, b, c in self.half_planes],
            "area_pu2": self.area,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FlexibilityArea":
        verts = np.array(doc["vertices"], dtype=float).reshape(-1, 2)
        dirs = tuple(float("nan") if d is None else float(d) for d in doc.get("direction_deg", []))
        hp = doc.get("half_planes")
        return cls(
            vertices=verts,
            base=tuple(doc["base"]),
            half_planes=np.array(hp, dtype=float).reshape(-1, 3) if hp else halfplanes(verts),
            s_base=float(doc.get("s_base_mva", 1.0)),
            vertex_directions=dirs,
            diagnostics=tuple(doc.get("diagnostics", [])),
        )

    @classmethod
    def from_csv(cls, text: str, base: tuple[float, float] | None = None, s_base: float = 1.0):
        rows = list(csv.DictReader(io.StringIO(text)))
        verts = np.array([[float(r["p_pu"]), float(r["q_pu"])] for r in rows]).reshape(-1, 2)
        dirs = tuple(float(r["direction_deg"]) for r in rows)
        if base is None:
            base = tuple(verts.mean(axis=0))
        return cls(verts, base, halfplanes(verts), s_base, dirs)


def der_bounds(der) -> tuple[tuple[float, float], tuple[float, float]]:
    """Box on (dP, dQ) around the DER's current output: curtailment only, by at
    most ``curtailable_fraction * p_max`` (and never below zero output); Q
    anywhere in [q_min, q_max]."""
    curt = min(der.curtailable_fraction * der.p_max, max(der.p_set, 0.0))
    return (-curt, 0.0), (der.q_min - der.q_set, der.q_max - der.q_set)


def build_direction_lp(model: GridModel, sens: SensitivityMatrices, base: OperatingPoint,
                       direction: DirectionWeights) -> LvOpfProblem:
    bld = ProgramBuilder()
    xp, xq, der_ids = [], [], []
    for d in model.ders:
        if d.bus not in sens.control_ids:
            raise ValueError(f"DER {d.id!r} at bus {d.bus!r} has no sensitivity column")
        (plo, phi), (qlo, qhi) = der_bounds(d)
        xp.append(bld.var(f"dP[{d.id}]", plo, phi))
        xq.append(bld.var(f"dQ[{d.id}]", qlo, qhi))
        der_ids.append(d.id)
    cols = [sens.column(d.bus) for d in model.ders]

    p_row = np.zeros(len(bld.names))
    q_row = np.zeros(len(bld.names))
    for k, c in enumerate(cols):
        p_row[xp[k]] = sens.k_sp[c]
        p_row[xq[k]] = sens.k_sq[c]
        q_row[xp[k]] = sens.k_qp[c]
        q_row[xq[k]] = sens.k_qq[c]
    for j in range(len(bld.names)):
        bld.cost(j, -(direction.alpha_dir * p_row[j] + direction.beta_dir * q_row[j]))

    violations = []
    slack = model.slack.id
    for r, bus_id in enumerate(sens.bus_ids):
        if bus_id == slack or bus_id not in model.bus_index:
            continue
        bus = model.buses[model.bus_index[bus_id]]
        v0 = base.v_of(bus_id)
        if not bus.v_min <= v0 <= bus.v_max:
            violations.append(bus_id)
        row = {}
        for k, c in enumerate(cols):
            row[xp[k]] = row.get(xp[k], 0.0) + sens.k_vp[r, c]
            row[xq[k]] = row.get(xq[k], 0.0) + sens.k_vq[r, c]
        bld.add_le(row, bus.v_max - v0)
        bld.add_le({j: -a for j, a in row.items()}, v0 - bus.v_min)
    for r, br_id in enumerate(sens.branch_ids):
        if br_id not in model.branch_index:
            continue
        br = model.branches[model.branch_index[br_id]]
        i0 = base.i_of(br_id)
        if i0 > br.i_max:
            violations.append(br_id)
        row = {}
        for k, c in enumerate(cols):
            row[xp[k]] = row.get(xp[k], 0.0) + sens.k_ip[r, c]
            row[xq[k]] = row.get(xq[k], 0.0) + sens.k_iq[r, c]
        bld.add_le(row, br.i_max - i0)
        bld.add_le({j: -a for j, a in row.items()}, br.i_max + i0)
    return LvOpfProblem(
        program=bld.build(meta={"kind": "lv_direction"}),
        der_ids=der_ids,
        p_row=p_row,
        q_row=q_row,
        base_transfer=(base.p_slack, base.q_slack),
        direction=direction,
        base_violations=violations,
    )


@dataclass(frozen=True)
class TransferPoint:
    direction_deg: float
    p: float
    q: float
    setpoints: dict
    status: str


# near-tied faces need a tight gap for the interior point to land on the corner
LP_TOL = 1e-10


def solve_direction(problem: LvOpfProblem) -> TransferPoint:
    res = conic.solve(problem.program, LP_TOL, LP_TOL, 400)
    if res.status == conic.NUMERIC_FAILURE:
        res = conic.solve(problem.program)
    x = res.x if res.optimal else np.zeros(problem.n_vars)
    n = len(problem.der_ids)
    setpoints = {d: (float(x[2 * k]), float(x[2 * k + 1])) for k, d in enumerate(problem.der_ids)} if n else {}
    p0, q0 = problem.base_transfer
    return TransferPoint(
        problem.direction.degrees,
        p0 + float(problem.p_row @ x),
        q0 + float(problem.q_row @ x),
        setpoints,
        res.status,
    )


def sweep_directions(n: int) -> list[DirectionWeights]:
    """Uniform angles, scaled so the largest weight is 1; n=8 gives {0, +-1}^2 minus the origin."""
    out = []
    for k in range(n):
        th = 2.0 * math.pi * k / n
        c, s = math.cos(th), math.sin(th)
        m = max(abs(c), abs(s))
        w = []
        for val in (c / m, s / m):
            r = round(val)
            w.append(float(r) if abs(val - r) < 1e-12 else val)
        out.append(DirectionWeights(*w))
    return out


def sweep_flexibility_area(model: GridModel, sens: SensitivityMatrices, base: OperatingPoint,
                           n_directions: int = 8, s_base: float | None = None) -> FlexibilityArea:
    if n_directions < 4:
        raise ValueError("need at least 4 search directions")
    s_base = model.s_base if s_base is None else s_base
    p0, q0 = base.p_slack, base.q_slack
    points: list[TransferPoint] = []
    diag = []
    for w in sweep_directions(n_directions):
        prob = build_direction_lp(model, sens, base, w)
        if prob.base_violations and not diag:
            diag.append("base point outside limits at " + ", ".join(prob.base_violations))
        tp = solve_direction(prob)
        if tp.status != conic.OPTIMAL:
            diag.append(f"direction {tp.direction_deg:g} deg: {tp.status}; area collapsed to base point")
            return _point_area((p0, q0), s_base, tuple(diag))
        points.append(tp)
    if not (prob.base_violations):
        points.append(TransferPoint(float("nan"), p0, q0, {d: (0.0, 0.0) for d in prob.der_ids}, "base"))
    cloud = np.array([[t.p, t.q] for t in points])
    hull = convex_hull(cloud)
    dirs, sets = [], []
    for v in hull:
        k = int(np.argmin(np.hypot(cloud[:, 0] - v[0], cloud[:, 1] - v[1])))
        dirs.append(points[k].direction_deg)
        sets.append(points[k].setpoints)
    return FlexibilityArea(
        vertices=hull,
        base=(p0, q0),
        half_planes=halfplanes(hull),
        s_base=s_base,
        vertex_directions=tuple(dirs),
        vertex_setpoints=tuple(sets),
        diagnostics=tuple(diag),
    )


def _point_area(base, s_base, diag) -> FlexibilityArea:
    v = np.array([base], dtype=float)
    return FlexibilityArea(v, tuple(base), halfplanes(v), s_base, (float("nan"),), ({},), diag)


def apply_worst_case_shift(base: OperatingPoint, sens: SensitivityMatrices, unc: UncertaintyModel,
                           sign: int) -> OperatingPoint:
    """Move every uncertain DER injection by sign * level * min(1, budget) * half-width
    and propagate through the sensitivities.

    The LV fleet is treated as one aggregate uncertain injection, so its
    budget share is min(1, budget).
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if unc.level == 0 or unc.budget == 0:
        return base
    scale = sign * unc.level * min(1.0, unc.budget)
    dp = np.zeros(len(sens.control_ids))
    dq = np.zeros(len(sens.control_ids))
    for bus, (hp, hq) in unc.half_widths.items():
        c = sens.column(bus)
        dp[c] += scale * hp
        dq[c] += scale * hq
    return shifted_operating_point(sens, base, dp, dq)


def polygon_to_halfplanes(area: FlexibilityArea) -> np.ndarray:
    return halfplanes(area.vertices)


def robust_transfer_area(nominal: FlexibilityArea, shifted: list[FlexibilityArea]) -> FlexibilityArea:
    """Setpoints around the nominal base that stay inside every shifted area
    once that area's own base displacement is accounted for.

    The result's half-planes concatenate all members (translated); its
    vertices are the clipped nominal polygon.
    """
    rows = [nominal.half_planes]
    p0, q0 = nominal.base
    for a in shifted:
        if not math.isclose(a.s_base, nominal.s_base):
            a = a.rescaled(nominal.s_base)
        rel = a.relative_halfplanes()
        rel[:, 2] += rel[:, 0] * p0 + rel[:, 1] * q0
        rows.append(rel)
    hp = np.vstack(rows)
    verts = intersect_halfplanes(nominal.vertices, hp[len(nominal.half_planes):])
    diag = nominal.diagnostics
    if len(verts) == 0:
        # no setpoint change is safe under every realisation: leave the transfer where it is
        return _point_area(nominal.base, nominal.s_base,
                           diag + ("robust transfer area is empty; transfer pinned to the base point",))
    return FlexibilityArea(
        vertices=verts.reshape(-1, 2),
        base=nominal.base,
        half_planes=hp,
        s_base=nominal.s_base,
        vertex_directions=(float("nan"),) * len(verts),
        diagnostics=diag,
    )


def area_json(areas: dict[str, FlexibilityArea]) -> str:
    return json.dumps({k: a.to_json_dict() for k, a in sorted(areas.items())}, indent=2, sort_keys=True)

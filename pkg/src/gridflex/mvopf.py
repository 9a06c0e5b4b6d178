"""Robust branch-flow OPF for the MV feeder.

Squared voltages ``v`` and squared currents ``l`` per oriented branch, the
branch-flow recursion, and the relaxed rotated cone ``P^2 + Q^2 <= v_i l``.
Voltage and current limits are soft: violations land in nonnegative slack
variables that are priced in the objective.  Buses feeding an LV grid carry
a transfer setpoint constrained to that grid's flexibility polygon.

Uncertain generation enters every balance row as ``level * w_k * h_k``.
``robustify`` takes the worst case of each inequality over the budget set
and leaves the balance rows at the forecast midpoint; realised deviations
are absorbed by the slack bus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import conic
from .conic import ConicProgram, ProgramBuilder, SolveResult
from .flexibility import FlexibilityArea
from .grid import GridModel
from .uncertainty import UncertaintyModel, budget_dual_norm, is_admissible

__all__ = [
    "ObjectiveWeights",
    "NodeForecast",
    "MvOpfSolution",
    "TightnessReport",
    "OpfError",
    "build_socp",
    "robustify",
    "solve_mv_opf",
    "violation_cost",
    "check_soc_tightness",
    "uncertainty_from_forecasts",
    "realize",
    "setpoint_values",
    "SLACK_SNAP",
]

# slack values below this are solver noise, not violations
SLACK_SNAP = 1e-7
# cone gaps scale with the interior-point tolerance; 1e-8 leaves ~1e-6 gaps
SOLVE_TOL = 1e-10
# pinned setpoints are checked against rows at the default feasibility tolerance
PIN_TOL = 1e-8


class OpfError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveWeights:
    w_l: float = 1.0
    w_v: float = 100.0
    w_lim: float = 100.0
    w_p: float = 0.01
    w_q: float = 0.01

    def __post_init__(self):
        for name in ("w_l", "w_v", "w_lim", "w_p", "w_q"):
            if getattr(self, name) < 0:
                raise OpfError(f"objective weight {name} must be non-negative")


@dataclass(frozen=True)
class NodeForecast:
    """Per-unit generation forecast and consumption at one MV bus.

    At a bus feeding an LV grid the generation midpoint is already inside
    the transfer setpoint; only the half-widths and any MV-level load are used.
    """

    p_gen_mid: float = 0.0
    q_gen_mid: float = 0.0
    p_gen_halfwidth: float = 0.0
    q_gen_halfwidth: float = 0.0
    p_load: float = 0.0
    q_load: float = 0.0

    def __post_init__(self):
        if self.p_gen_halfwidth < 0 or self.q_gen_halfwidth < 0:
            raise OpfError("forecast half-widths must be non-negative")

    @property
    def uncertain(self) -> bool:
        return self.p_gen_halfwidth > 0 or self.q_gen_halfwidth > 0


@dataclass
class MvOpfSolution:
    status: str
    objective: float
    terms: dict[str, float]
    P: dict[str, float]
    Q: dict[str, float]
    l: dict[str, float]
    v: dict[str, float]
    v_dev: dict[str, float]
    i_dev: dict[str, float]
    transfers: dict[str, tuple[float, float]]  # LV-coupled bus -> (p, q) drawn by the LV grid
    der_setpoints: dict[str, tuple[float, float]]
    p_slack: float
    q_slack: float
    losses_pu: float
    result: SolveResult | None = None
    branch_from: dict[str, str] = field(default_factory=dict)
    scenario_w: tuple[float, ...] | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def optimal(self) -> bool:
        return self.status == conic.OPTIMAL

    @property
    def slack_sum(self) -> float:
        return sum(self.v_dev.values()) + sum(self.i_dev.values())


def _oriented(model: GridModel):
    """(branch, parent bus, child bus) in breadth-first order."""
    topo = model.topology
    return [
        (model.branches[model.branch_index[topo.parent_branch[j]]], topo.parent_bus[j], j)
        for j in topo.order[1:]
    ]


def uncertainty_from_forecasts(forecasts: Mapping[str, NodeForecast], level: float, budget: float,
                               max_level: float = 1.0) -> UncertaintyModel:
    hw = {b: (f.p_gen_halfwidth, f.q_gen_halfwidth) for b, f in sorted(forecasts.items()) if f.uncertain}
    return UncertaintyModel(level, budget, hw, max_level)


def build_socp(model: GridModel, forecasts: Mapping[str, NodeForecast],
               areas: Mapping[str, FlexibilityArea], weights: ObjectiveWeights = ObjectiveWeights(),
               v_slack: float = 1.0) -> ConicProgram:
    """Deterministic core program (all w = 0) with uncertainty coefficients attached."""
    if not isinstance(weights, ObjectiveWeights):
        raise OpfError("weights must be ObjectiveWeights")
    for bus in model.attached_lv_grids:
        if bus not in areas:
            raise OpfError(f"no flexibility area for LV-coupled bus {bus!r}")
    for bus in list(forecasts) + list(areas):
        if bus not in model.bus_index:
            raise OpfError(f"forecast/area given for unknown bus {bus!r}")
    topo = model.topology
    slack = model.slack.id
    branches = _oriented(model)
    fc = {b: forecasts.get(b, NodeForecast()) for b in model.bus_ids}
    unc_ids = tuple(b for b in model.bus_ids if fc[b].uncertain)
    uidx = {b: k for k, b in enumerate(unc_ids)}

    bld = ProgramBuilder()
    v = {b.id: bld.var(f"v[{b.id}]", 0.0) for b in model.buses}
    P, Q, L = {}, {}, {}
    for br, i, j in branches:
        P[br.id] = bld.var(f"P[{br.id}]")
        Q[br.id] = bld.var(f"Q[{br.id}]")
        L[br.id] = bld.var(f"l[{br.id}]", 0.0)
    p_sl = bld.var("p_sl")
    q_sl = bld.var("q_sl")
    vdev = {b.id: bld.var(f"V_dev[{b.id}]", 0.0) for b in model.buses if b.id != slack}
    idev = {br.id: bld.var(f"I_dev[{br.id}]", 0.0) for br, _, _ in branches}
    tp, tq = {}, {}
    for bus in sorted(areas):
        tp[bus] = bld.var(f"p_lv[{bus}]")
        tq[bus] = bld.var(f"q_lv[{bus}]")
    gp, gq = {}, {}
    for d in model.ders:
        gp[d.id] = bld.var(f"p_der[{d.id}]")
        gq[d.id] = bld.var(f"q_der[{d.id}]")

    for br, _, _ in branches:
        bld.cost(L[br.id], weights.w_l * br.r)
        bld.cost(idev[br.id], weights.w_lim)
    for j in vdev.values():
        bld.cost(j, weights.w_v)
    bld.cost(p_sl, weights.w_p)
    bld.cost(q_sl, weights.w_q)

    bld.add_eq({v[slack]: 1.0}, v_slack**2, label=f"v_ref[{slack}]")

    # nodal balance: inflow - losses - outflow + local generation - local draw = 0
    inflow = {j: br for br, _, j in branches}
    outflow: dict[str, list] = {b: [] for b in model.bus_ids}
    for br, i, _ in branches:
        outflow[i].append(br)
    for bus in model.bus_ids:
        f = fc[bus]
        tp_row: dict[int, float] = {}
        tq_row: dict[int, float] = {}
        if bus == slack:
            tp_row[p_sl] = 1.0
            tq_row[q_sl] = 1.0
        else:
            br = inflow[bus]
            tp_row[P[br.id]] = 1.0
            tp_row[L[br.id]] = -br.r
            tq_row[Q[br.id]] = 1.0
            tq_row[L[br.id]] = -br.x
        for br in outflow[bus]:
            tp_row[P[br.id]] = tp_row.get(P[br.id], 0.0) - 1.0
            tq_row[Q[br.id]] = tq_row.get(Q[br.id], 0.0) - 1.0
        rhs_p, rhs_q = f.p_load, f.q_load
        if bus in tp:
            tp_row[tp[bus]] = -1.0
            tq_row[tq[bus]] = -1.0
        ders = model.ders_at(bus)
        for d in ders:
            tp_row[gp[d.id]] = 1.0
            tq_row[gq[d.id]] = 1.0
        if not ders and bus not in tp:
            # uncontrolled generation at its forecast midpoint
            rhs_p -= f.p_gen_mid
            rhs_q -= f.q_gen_mid
        unc_p = {uidx[bus]: -f.p_gen_halfwidth} if bus in uidx and f.p_gen_halfwidth else None
        unc_q = {uidx[bus]: -f.q_gen_halfwidth} if bus in uidx and f.q_gen_halfwidth else None
        bld.add_eq(tp_row, rhs_p, unc_p, label=f"balance_p[{bus}]")
        bld.add_eq(tq_row, rhs_q, unc_q, label=f"balance_q[{bus}]")

    for br, i, j in branches:
        bld.add_eq(
            {v[j]: 1.0, v[i]: -1.0, P[br.id]: 2 * br.r, Q[br.id]: 2 * br.x, L[br.id]: -(br.r**2 + br.x**2)},
            0.0, label=f"drop[{br.id}]",
        )
        bld.add_cone(v[i], L[br.id], P[br.id], Q[br.id])

    # linear worst-case surrogates: extra generation at k raises v_j by
    # 2 (R hp + X hq) over the shared path, and moves |S| on every branch
    # above k by at most |h_k|
    paths = {b: set(topo.path_to_root(b)) for b in model.bus_ids}
    brmap = {br.id: br for br, _, _ in branches}
    for bus in model.bus_ids:
        if bus == slack:
            continue
        b = model.buses[model.bus_index[bus]]
        coef = {}
        for k in unc_ids:
            shared = paths[bus] & paths[k]
            if not shared:
                continue
            hp, hq = fc[k].p_gen_halfwidth, fc[k].q_gen_halfwidth
            c = 2.0 * sum(brmap[s].r * hp + brmap[s].x * hq for s in shared)
            if c:
                coef[uidx[k]] = c
        bld.add_le({v[bus]: 1.0, vdev[bus]: -1.0}, b.v_max**2, coef or None, mediated=True, label=f"v_max[{bus}]")
        bld.add_le({v[bus]: -1.0, vdev[bus]: -1.0}, -b.v_min**2, {k: -c for k, c in coef.items()} or None,
                   mediated=True, label=f"v_min[{bus}]")
    for br, _, j in branches:
        coef = {}
        below = set(topo.downstream(j))
        for k in unc_ids:
            if k in below:
                coef[uidx[k]] = 2.0 * br.i_max * math.hypot(fc[k].p_gen_halfwidth, fc[k].q_gen_halfwidth)
        bld.add_le({L[br.id]: 1.0, idev[br.id]: -1.0}, br.i_max**2, coef or None, mediated=True,
                   label=f"i_max[{br.id}]")

    for bus, area in sorted(areas.items()):
        if not math.isclose(area.s_base, model.s_base):
            area = area.rescaled(model.s_base)
        if len(area.vertices) == 0:
            raise OpfError(f"flexibility area at {bus!r} is empty")
        for r, (a, b_, c) in enumerate(area.half_planes):
            bld.add_le({tp[bus]: a, tq[bus]: b_}, c, label=f"area[{bus}][{r}]")

    for d in model.ders:
        f = fc[d.bus]
        avail = min(f.p_gen_mid, d.p_max) if d.bus in forecasts else d.p_set
        # dispatch within the curtailment range of the forecast midpoint
        bld.add_le({gp[d.id]: 1.0}, avail, label=f"p_avail[{d.id}]")
        bld.add_le({gp[d.id]: -1.0}, -(1.0 - d.curtailable_fraction) * avail, label=f"p_curt[{d.id}]")
        k = uidx.get(d.bus)
        hp = f.p_gen_halfwidth if k is not None else 0.0
        hq = f.q_gen_halfwidth if k is not None else 0.0
        bld.add_le({gp[d.id]: 1.0}, d.p_max, {k: hp} if hp else None, label=f"p_max[{d.id}]")
        bld.add_le({gp[d.id]: -1.0}, 0.0, {k: -hp} if hp else None, label=f"p_min[{d.id}]")
        bld.add_le({gq[d.id]: 1.0}, d.q_max, {k: hq} if hq else None, label=f"q_max[{d.id}]")
        bld.add_le({gq[d.id]: -1.0}, -d.q_min, {k: -hq} if hq else None, label=f"q_min[{d.id}]")

    meta = {
        "kind": "mv_socp",
        "v": v, "P": P, "Q": Q, "l": L, "p_sl": p_sl, "q_sl": q_sl,
        "v_dev": vdev, "i_dev": idev, "tp": tp, "tq": tq, "gp": gp, "gq": gq,
        "weights": weights,
        "r": {br.id: br.r for br, _, _ in branches},
        "from": {br.id: i for br, i, _ in branches},
        "s_base": model.s_base,
    }
    return bld.build(unc_ids=unc_ids, meta=meta)


def robustify(prog: ConicProgram, unc: UncertaintyModel) -> ConicProgram:
    """Replace every uncertain inequality by its worst case over
    { |w|_inf <= 1, |w|_1 <= budget }: the right-hand side drops by
    ``level * budget_dual_norm(row)``.  Balance rows are left at the midpoint."""
    if unc.budget < 0:
        raise OpfError("uncertainty budget must be non-negative")
    out = prog.replace(level=float(unc.level), budget=float(unc.budget))
    if unc.budget == 0 or unc.level == 0 or prog.ineq_unc is None or prog.ineq_unc.nnz == 0:
        return out
    M = prog.ineq_unc.tocsr()
    h = np.array(prog.h, dtype=float)
    scale = abs(unc.level)
    for r in range(M.shape[0]):
        lo, hi = M.indptr[r], M.indptr[r + 1]
        if hi > lo:
            h[r] -= scale * budget_dual_norm(M.data[lo:hi], unc.budget)
    return out.replace(h=h)


def _fix_setpoints(prog: ConicProgram, setpoints: Mapping[str, float]):
    """Pin named variables; rows left with only pinned variables are checked
    directly and dropped.  Returns (program, list of violated row labels)."""
    index = {n: k for k, n in enumerate(prog.names)}
    lb, ub = prog.lb.copy(), prog.ub.copy()
    fixed = np.zeros(prog.n, dtype=bool)
    x0 = np.zeros(prog.n)
    for name, val in setpoints.items():
        if name not in index:
            raise OpfError(f"unknown setpoint variable {name!r}")
        k = index[name]
        lb[k] = ub[k] = x0[k] = float(val)
        fixed[k] = True
    G = prog.G.tocsr()
    labels = prog.meta.get("le_labels", ())
    gx = G @ x0
    keep, violated = [], []
    for r in range(G.shape[0]):
        cols = G.indices[G.indptr[r]:G.indptr[r + 1]]
        if len(cols) and np.all(fixed[cols]):
            if gx[r] - prog.h[r] > PIN_TOL * max(1.0, abs(prog.h[r])):
                violated.append(labels[r] if r < len(labels) else f"row {r}")
        else:
            keep.append(r)
    keep = np.array(keep, dtype=int)
    meta = dict(prog.meta)
    meta["le_labels"] = tuple(labels[r] for r in keep) if labels else ()
    out = prog.replace(
        lb=lb, ub=ub, G=G[keep], h=prog.h[keep],
        ineq_unc=prog.ineq_unc[keep] if prog.ineq_unc is not None else None,
        ineq_mediated=prog.ineq_mediated[keep] if prog.ineq_mediated is not None else None,
        h_nominal=prog.h_nominal[keep] if prog.h_nominal is not None else None,
        meta=meta,
    )
    return out, violated


def _scenario_vector(prog: ConicProgram, w) -> np.ndarray:
    if isinstance(w, Mapping):
        unknown = set(w) - set(prog.unc_ids)
        if unknown:
            raise OpfError(f"scenario names non-uncertain buses {sorted(unknown)}")
        return np.array([float(w.get(b, 0.0)) for b in prog.unc_ids])
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (len(prog.unc_ids),):
        raise OpfError(f"scenario needs {len(prog.unc_ids)} entries, got {w.shape[0]}")
    return w


def realize(prog: ConicProgram, w, level: float | None = None) -> ConicProgram:
    """Deterministic program for one realisation: balance rows take the
    realised injections, DER bound rows the realised output; surrogate rows
    revert to their nominal limits since the flows now carry the deviation."""
    w = _scenario_vector(prog, w)
    if not is_admissible(w, prog.budget, tol=1e-9):
        raise OpfError(f"scenario w is outside the uncertainty set (budget {prog.budget})")
    level = prog.level if level is None else level
    aw = level * w
    b = prog.b + (prog.eq_unc @ aw if prog.eq_unc is not None and prog.eq_unc.shape[0] else 0.0)
    h_nom = prog.h_nominal if prog.h_nominal is not None else prog.h
    h = np.array(h_nom, dtype=float)
    if prog.ineq_unc is not None and prog.ineq_unc.shape[0]:
        shift = prog.ineq_unc @ aw
        med = prog.ineq_mediated if prog.ineq_mediated is not None else np.zeros(len(h), dtype=bool)
        h[~med] -= shift[~med]
    return prog.replace(b=np.asarray(b, dtype=float), h=h)


def setpoint_values(sol: MvOpfSolution) -> dict[str, float]:
    """Control variables of a solution keyed by program variable name."""
    out = {}
    for bus, (p, q) in sol.transfers.items():
        out[f"p_lv[{bus}]"] = p
        out[f"q_lv[{bus}]"] = q
    for d, (p, q) in sol.der_setpoints.items():
        out[f"p_der[{d}]"] = p
        out[f"q_der[{d}]"] = q
    return out


def solve_mv_opf(prog: ConicProgram, scenario_w=None, setpoints: Mapping[str, float] | None = None,
                 level: float | None = None) -> MvOpfSolution:
    """Solve the program, optionally at a fixed realisation ``scenario_w``
    (admissible for the program's budget) and with pinned control setpoints."""
    diag: list[str] = []
    work = prog
    w = None
    if scenario_w is not None:
        w = _scenario_vector(prog, scenario_w)
        work = realize(prog, w, level)
    if setpoints:
        work, violated = _fix_setpoints(work, setpoints)
        if violated:
            diag.append("setpoints violate " + ", ".join(violated))
            return _empty_solution(prog, conic.INFEASIBLE, w, tuple(diag))
    res = conic.solve(work, SOLVE_TOL, SOLVE_TOL, 400)
    if res.status == conic.NUMERIC_FAILURE:
        res = conic.solve(work)
        diag.append("tight tolerance stalled; solved at default tolerance")
    if not res.optimal:
        diag.append(f"solver status {res.raw_status} after {res.iterations} iterations, "
                    f"primal residual {res.primal_residual:.3g}, dual residual {res.dual_residual:.3g}")
        sol = _empty_solution(prog, res.status, w, tuple(diag))
        sol.result = res
        return sol
    return _extract(prog, res, w, tuple(diag))


def _empty_solution(prog, status, w, diag) -> MvOpfSolution:
    return MvOpfSolution(status, float("nan"), {}, {}, {}, {}, {}, {}, {}, {}, {}, float("nan"), float("nan"),
                         float("nan"), None, dict(prog.meta.get("from", {})),
                         None if w is None else tuple(float(a) for a in w), diag)


def _snap(x: float) -> float:
    return 0.0 if x < SLACK_SNAP else x


def _extract(prog: ConicProgram, res: SolveResult, w, diag) -> MvOpfSolution:
    m = prog.meta
    x = res.x
    wt: ObjectiveWeights = m["weights"]
    P = {k: float(x[j]) for k, j in m["P"].items()}
    Q = {k: float(x[j]) for k, j in m["Q"].items()}
    L = {k: float(x[j]) for k, j in m["l"].items()}
    v = {k: float(x[j]) for k, j in m["v"].items()}
    vdev = {k: _snap(float(x[j])) for k, j in m["v_dev"].items()}
    idev = {k: _snap(float(x[j])) for k, j in m["i_dev"].items()}
    losses = float(sum(m["r"][k] * L[k] for k in L))
    p_sl, q_sl = float(x[m["p_sl"]]), float(x[m["q_sl"]])
    terms = {
        "losses": wt.w_l * losses,
        "voltage": wt.w_v * sum(vdev.values()),
        "current": wt.w_lim * sum(idev.values()),
        "p_slack": wt.w_p * p_sl,
        "q_slack": wt.w_q * q_sl,
    }
    return MvOpfSolution(
        status=res.status,
        objective=float(sum(terms.values())),
        terms=terms,
        P=P, Q=Q, l=L, v=v, v_dev=vdev, i_dev=idev,
        transfers={b: (float(x[m["tp"][b]]), float(x[m["tq"][b]])) for b in m["tp"]},
        der_setpoints={d: (float(x[m["gp"][d]]), float(x[m["gq"][d]])) for d in m["gp"]},
        p_slack=p_sl,
        q_slack=q_sl,
        losses_pu=losses,
        result=res,
        branch_from=dict(m["from"]),
        scenario_w=None if w is None else tuple(float(a) for a in w),
        diagnostics=diag,
    )


def violation_cost(sol: MvOpfSolution, rate: float = 100.0) -> float:
    """``rate`` times the summed voltage (pu^2) and current (pu^2) slacks."""
    return rate * sol.slack_sum


@dataclass(frozen=True)
class TightnessReport:
    gaps: dict[str, float]  # v_from * l - P^2 - Q^2
    tol: float
    flagged: tuple[str, ...]

    @property
    def tight(self) -> bool:
        return not self.flagged

    @property
    def max_gap(self) -> float:
        return max(self.gaps.values(), default=0.0)


def check_soc_tightness(sol: MvOpfSolution, tol: float = 1e-6) -> TightnessReport:
    gaps = {}
    for k in sorted(sol.l):
        gaps[k] = sol.v[sol.branch_from[k]] * sol.l[k] - (sol.P[k] ** 2 + sol.Q[k] ** 2)
    flagged = tuple(k for k, g in gaps.items() if g > tol)
    return TightnessReport(gaps, tol, flagged)

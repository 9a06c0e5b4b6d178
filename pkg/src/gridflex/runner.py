"""Scenario orchestration: LV flexibility sweep, then the robust MV OPF,
then evaluation of the robust setpoints at the lower/expected/upper
forecast realisations.  Produces a deterministic JSON report plus polygon
CSVs; wall-clock data goes to a separate sidecar file.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, conic
from .flexibility import (
    FlexibilityArea,
    apply_worst_case_shift,
    robust_transfer_area,
    sweep_flexibility_area,
)
from .grid import GridModel, NetworkError, load_attached_grids, load_network_file
from .mvopf import (
    MvOpfSolution,
    NodeForecast,
    ObjectiveWeights,
    OpfError,
    build_socp,
    robustify,
    setpoint_values,
    solve_mv_opf,
    uncertainty_from_forecasts,
    violation_cost,
)
from .powerflow import energy_kwh
from .sensitivity import (
    EstimationError,
    estimate_from_measurements,
    operating_point_from_series,
    read_measurements_csv,
    shifted_operating_point,
)
from .uncertainty import UncertaintyModel, worst_case_vector

__all__ = [
    "ScenarioConfig",
    "ScenarioReport",
    "StageError",
    "load_config",
    "read_forecasts_csv",
    "run_flexibility",
    "run_mv",
    "run_scenario",
    "emit_polygon_csv",
    "emit_report_json",
    "write_outputs",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1
REALIZATIONS = (("lower", -1.0), ("expected", 0.0), ("upper", 1.0))
FORECAST_COLUMNS = (
    "bus_id", "p_gen_mid_kw", "q_gen_mid_kvar", "p_gen_halfwidth_kw",
    "q_gen_halfwidth_kvar", "p_load_kw", "q_load_kvar",
)


class StageError(RuntimeError):
    """Pipeline failure; ``kind`` is input, infeasible or solver."""

    def __init__(self, stage: str, message: str, kind: str = "input", status: str = ""):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.kind = kind
        self.status = status


@dataclass(frozen=True)
class ScenarioConfig:
    mv_network: str
    forecasts: str
    measurements: dict[str, str] = field(default_factory=dict)  # MV bus -> LV measurement CSV
    label: str = "today"
    alpha: float = 0.5
    gamma: float = 1.0
    max_alpha: float = 1.0
    directions: int = 8
    weights: ObjectiveWeights = ObjectiveWeights()
    violation_rate: float = 100.0
    horizon_hours: float = 24.0
    future_load_kw: float = 0.0
    window: int | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.directions < 4:
            raise ValueError("directions must be >= 4")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if abs(self.alpha) > self.max_alpha:
            raise ValueError(f"|alpha| must be <= {self.max_alpha}")
        if self.horizon_hours <= 0:
            raise ValueError("horizon_hours must be > 0")
        if self.violation_rate < 0:
            raise ValueError("violation_rate must be >= 0")

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def load_config(path: str | Path, **overrides) -> ScenarioConfig:
    """Read a JSON scenario file; non-None keyword overrides win."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StageError("config", f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise StageError("config", f"config parse failure: {exc}") from None
    doc.update({k: v for k, v in overrides.items() if v is not None})
    weights = doc.pop("weights", {})
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(doc) - known
    if unknown:
        raise StageError("config", f"unknown config keys {sorted(unknown)}")
    doc.setdefault("base_dir", str(path.parent))
    try:
        return ScenarioConfig(weights=ObjectiveWeights(**weights), **doc)
    except (TypeError, ValueError) as exc:
        raise StageError("config", str(exc)) from None


def read_forecasts_csv(text: str, s_base_mva: float) -> dict[str, NodeForecast]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != FORECAST_COLUMNS:
        raise StageError("forecasts", "forecast CSV header must be " + ",".join(FORECAST_COLUMNS))
    out = {}
    scale = 1e-3 / s_base_mva
    for r in rows:
        try:
            vals = [float(r[c]) * scale for c in FORECAST_COLUMNS[1:]]
            out[r["bus_id"]] = NodeForecast(*vals)
        except (ValueError, OpfError) as exc:
            raise StageError("forecasts", f"bus {r['bus_id']!r}: {exc}") from None
    return out


@dataclass
class LvResult:
    bus: str
    grid: str
    nominal: FlexibilityArea
    lower: FlexibilityArea
    upper: FlexibilityArea
    robust: FlexibilityArea  # on the MV power base
    residual_max: float
    samples: int


@dataclass
class ScenarioReport:
    doc: dict
    lv: dict[str, LvResult]
    robust: MvOpfSolution | None
    realizations: dict[str, MvOpfSolution]


def _load_shift(lv: GridModel, sens, base, load_kw: float):
    """Predicted operating point after ``load_kw`` extra uncontrolled load,
    spread over the loaded buses at their own power factor."""
    loaded = [b for b in lv.buses if b.kind != "slack" and b.p_load > 0 and b.id in sens.control_ids]
    if not loaded:
        raise StageError("future-load", f"LV grid {lv.name!r} has no loaded bus to scale", "input")
    total = sum(b.p_load for b in loaded)
    extra = load_kw * 1e-3 / lv.s_base
    dp = {b.id: -extra * b.p_load / total for b in loaded}
    dq = {b.id: dp[b.id] * b.q_load / b.p_load for b in loaded}
    return shifted_operating_point(sens, base, dp, dq)


def _lv_uncertainty(lv: GridModel, fc: NodeForecast, mv_s_base: float, cfg: ScenarioConfig) -> UncertaintyModel:
    """Split the MV-level forecast half-width over the LV DERs by output share."""
    total = sum(d.p_set for d in lv.ders)
    hw: dict[str, tuple[float, float]] = {}
    f = mv_s_base / lv.s_base
    for d in lv.ders:
        share = d.p_set / total if total > 0 else 1.0 / len(lv.ders)
        hp, hq = hw.get(d.bus, (0.0, 0.0))
        hw[d.bus] = (hp + share * fc.p_gen_halfwidth * f, hq + share * fc.q_gen_halfwidth * f)
    return UncertaintyModel(cfg.alpha, cfg.gamma, hw, cfg.max_alpha)


def _one_lv(cfg: ScenarioConfig, bus: str, lv: GridModel, fc: NodeForecast, mv_s_base: float) -> LvResult:
    stage = f"sensitivity[{bus}]"
    mpath = cfg.measurements.get(bus)
    if mpath is None:
        raise StageError(stage, f"no measurement file configured for LV grid at {bus!r}")
    try:
        series = read_measurements_csv(cfg.path(mpath).read_text(encoding="utf-8"))
        slack = lv.slack.id
        controls = [b for b in series.metered_buses if b != slack and b in lv.bus_index]
        sens = estimate_from_measurements(series, slack, window=cfg.window, controls=controls)
        base = operating_point_from_series(series, slack)
    except FileNotFoundError as exc:
        raise StageError(stage, f"measurement file missing: {exc.filename}") from None
    except EstimationError as exc:
        raise StageError(stage, str(exc)) from None
    if cfg.future_load_kw:
        base = _load_shift(lv, sens, base, cfg.future_load_kw)
    stage = f"flexibility[{bus}]"
    try:
        nominal = sweep_flexibility_area(lv, sens, base, cfg.directions)
        unc = _lv_uncertainty(lv, fc, mv_s_base, cfg)
        if unc.level == 0 or unc.budget == 0 or not unc.nodes:
            lower = upper = nominal
            robust = nominal
        else:
            upper = sweep_flexibility_area(lv, sens, apply_worst_case_shift(base, sens, unc, 1), cfg.directions)
            lower = sweep_flexibility_area(lv, sens, apply_worst_case_shift(base, sens, unc, -1), cfg.directions)
            robust = robust_transfer_area(nominal, [lower, upper])
    except ValueError as exc:
        raise StageError(stage, str(exc)) from None
    if len(robust.vertices) == 0:
        raise StageError(stage, "robust flexibility area is empty", "infeasible")
    resid = max(float(np.max(r, initial=0.0)) for r in sens.residuals.values())
    return LvResult(bus, lv.name, nominal, lower, upper, robust.rescaled(mv_s_base), resid, len(series))


def _load_inputs(cfg: ScenarioConfig):
    try:
        mv = load_network_file(cfg.path(cfg.mv_network))
        lvs = load_attached_grids(mv, cfg.path(cfg.mv_network).parent)
    except FileNotFoundError as exc:
        raise StageError("network", f"network file missing: {exc.filename}") from None
    except NetworkError as exc:
        el = f" (element {exc.element})" if exc.element else ""
        raise StageError("network", f"{exc}{el}") from None
    try:
        forecasts = read_forecasts_csv(cfg.path(cfg.forecasts).read_text(encoding="utf-8"), mv.s_base)
    except FileNotFoundError as exc:
        raise StageError("forecasts", f"forecast file missing: {exc.filename}") from None
    unknown = sorted(set(forecasts) - set(mv.bus_index))
    if unknown:
        raise StageError("forecasts", f"forecast rows for unknown buses {unknown}")
    return mv, lvs, forecasts


def run_flexibility(cfg: ScenarioConfig, mv: GridModel, lvs: dict[str, GridModel],
                    forecasts: dict[str, NodeForecast]) -> dict[str, LvResult]:
    buses = sorted(lvs)
    with ThreadPoolExecutor(max_workers=max(1, min(4, len(buses)))) as pool:
        results = list(pool.map(
            lambda b: _one_lv(cfg, b, lvs[b], forecasts.get(b, NodeForecast()), mv.s_base), buses))
    return dict(zip(buses, results))


def _status_error(stage: str, sol: MvOpfSolution) -> StageError:
    kind = "infeasible" if sol.status in (conic.INFEASIBLE, conic.UNBOUNDED) else "solver"
    detail = "; ".join(sol.diagnostics) or sol.status
    return StageError(stage, f"status {sol.status}: {detail}", kind, sol.status)


def run_mv(cfg: ScenarioConfig, mv: GridModel, forecasts: dict[str, NodeForecast],
           areas: dict[str, FlexibilityArea]):
    """Solve the robust program once, then re-solve at each realisation with
    the robust setpoints pinned."""
    try:
        prog = build_socp(mv, forecasts, areas, cfg.weights)
        unc = uncertainty_from_forecasts(forecasts, cfg.alpha, cfg.gamma, cfg.max_alpha)
        rob = robustify(prog, unc)
    except (OpfError, ValueError) as exc:
        raise StageError("mv-build", str(exc)) from None
    sol = solve_mv_opf(rob)
    if not sol.optimal:
        raise _status_error("mv-robust", sol)
    mags = [math.hypot(forecasts[b].p_gen_halfwidth, forecasts[b].q_gen_halfwidth) for b in rob.unc_ids]
    wvec = worst_case_vector(mags, cfg.gamma, 1.0)
    pins = setpoint_values(sol)
    collapse = cfg.alpha == 0 or not np.any(wvec)
    real = {}
    for name, sign in REALIZATIONS:
        if collapse and sign != 0:
            continue
        r = solve_mv_opf(rob, sign * wvec if len(wvec) else None, setpoints=pins)
        if not r.optimal:
            raise _status_error(f"mv-realization[{name}]", r)
        real[name] = r
    return rob, sol, real


def _solution_doc(sol: MvOpfSolution, cfg: ScenarioConfig, s_base: float) -> dict:
    return {
        "status": sol.status,
        "objective": sol.objective,
        "objective_terms": dict(sorted(sol.terms.items())),
        "losses_pu": sol.losses_pu,
        "losses_kwh": energy_kwh(sol.losses_pu, s_base, cfg.horizon_hours),
        "slack_sum_pu2": sol.slack_sum,
        "violation_cost_chf": violation_cost(sol, cfg.violation_rate),
        "p_slack_pu": sol.p_slack,
        "q_slack_pu": sol.q_slack,
        "w": None if sol.scenario_w is None else list(sol.scenario_w),
        "branches": {
            k: {"from": sol.branch_from[k], "P_pu": sol.P[k], "Q_pu": sol.Q[k], "l_pu2": sol.l[k],
                "I_dev_pu2": sol.i_dev[k]}
            for k in sorted(sol.P)
        },
        "buses": {
            k: {"v_pu2": sol.v[k], "v_pu": math.sqrt(max(sol.v[k], 0.0)),
                "V_dev_pu2": sol.v_dev.get(k, 0.0),
                # first-order conversion of the squared-voltage slack
                "V_dev_pu_approx": sol.v_dev.get(k, 0.0) / (2.0 * math.sqrt(max(sol.v[k], 1e-12)))}
            for k in sorted(sol.v)
        },
        "lv_transfers_pu": {k: list(v) for k, v in sorted(sol.transfers.items())},
        "der_setpoints_pu": {k: list(v) for k, v in sorted(sol.der_setpoints.items())},
    }


def _area_doc(a: FlexibilityArea) -> dict:
    d = a.to_json_dict()
    d["n_vertices"] = len(a.vertices)
    return d


def _versions() -> dict:
    import clarabel
    import scipy

    return {"gridflex": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "clarabel": clarabel.__version__}


def config_hash(cfg: ScenarioConfig) -> str:
    """sha256 over the canonical config and the bytes of every input file."""
    h = hashlib.sha256()
    h.update(json.dumps(cfg.as_dict(), sort_keys=True, default=str).encode())
    files = [cfg.mv_network, cfg.forecasts] + [cfg.measurements[k] for k in sorted(cfg.measurements)]
    for rel in files:
        p = cfg.path(rel)
        if p.exists():
            h.update(p.read_bytes())
    mv = cfg.path(cfg.mv_network)
    if mv.exists():
        for rel in sorted(json.loads(mv.read_text()).get("attached_lv_grids", {}).values()):
            q = mv.parent / rel
            if q.exists():
                h.update(q.read_bytes())
    return h.hexdigest()


def _lv_doc(res: LvResult) -> dict:
    return {
        "grid": res.grid,
        "samples": res.samples,
        "sensitivity_residual_max": res.residual_max,
        "areas_lv_base": {"nominal": _area_doc(res.nominal), "lower": _area_doc(res.lower),
                          "upper": _area_doc(res.upper)},
        "robust_area_mv_base": _area_doc(res.robust),
    }


def run_scenario(cfg: ScenarioConfig, stages: str = "all",
                 areas_override: dict[str, FlexibilityArea] | None = None) -> ScenarioReport:
    """``stages``: "all", "flex" (LV part only) or "opf" (MV part only, areas given)."""
    mv, lvs, forecasts = _load_inputs(cfg)
    lv_res: dict[str, LvResult] = {}
    if stages in ("all", "flex"):
        lv_res = run_flexibility(cfg, mv, lvs, forecasts)
        areas = {b: r.robust for b, r in lv_res.items()}
    else:
        areas = dict(areas_override or {})
    doc = {
        "schema_version": SCHEMA_VERSION,
        "label": cfg.label,
        "provenance": {"config_sha256": config_hash(cfg), "versions": _versions()},
        "parameters": {
            "alpha": cfg.alpha, "gamma": cfg.gamma, "directions": cfg.directions,
            "future_load_kw": cfg.future_load_kw, "horizon_hours": cfg.horizon_hours,
            "violation_rate_chf": cfg.violation_rate, "weights": dataclasses.asdict(cfg.weights),
            "s_base_mva": mv.s_base,
        },
        "lv_grids": {b: _lv_doc(r) for b, r in sorted(lv_res.items())},
    }
    if stages == "flex":
        return ScenarioReport(doc, lv_res, None, {})
    rob, sol, real = run_mv(cfg, mv, forecasts, areas)
    doc["uncertain_buses"] = list(rob.unc_ids)
    doc["robust_solution"] = _solution_doc(sol, cfg, mv.s_base)
    doc["realizations"] = {k: _solution_doc(v, cfg, mv.s_base) for k, v in real.items()}
    doc["summary"] = {
        k: {"losses_kwh": doc["realizations"][k]["losses_kwh"],
            "violation_cost_chf": doc["realizations"][k]["violation_cost_chf"]}
        for k in real
    }
    return ScenarioReport(doc, lv_res, sol, real)


def emit_report_json(report: ScenarioReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def emit_polygon_csv(report: ScenarioReport, out_dir: str | Path) -> list[Path]:
    """One CSV per LV grid per realisation (lower/expected/upper) plus the
    robust area actually passed to the MV program."""
    out_dir = Path(out_dir)
    if not report.lv:
        raise ValueError("report contains no flexibility areas")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for bus, res in sorted(report.lv.items()):
        for name, area in (("lower", res.lower), ("expected", res.nominal), ("upper", res.upper),
                           ("robust", res.robust)):
            p = out_dir / f"{bus}_{name}.csv"
            p.write_text(area.to_csv(), encoding="utf-8")
            written.append(p)
    return written


def write_outputs(report: ScenarioReport, out_dir: str | Path, started: float | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"report": emit_report_json(report, out_dir / "report.json")}
    if report.lv:
        emit_polygon_csv(report, out_dir / "polygons")
        poly = {b: r.robust.to_json_dict() for b, r in sorted(report.lv.items())}
        (out_dir / "polygons.json").write_text(json.dumps(poly, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sidecar = {"finished_utc": datetime.now(timezone.utc).isoformat()}
    if started is not None:
        sidecar["wall_seconds"] = time.perf_counter() - started
    (out_dir / "run_info.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return files


def read_polygons_json(path: str | Path) -> dict[str, FlexibilityArea]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StageError("polygons", f"polygon file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise StageError("polygons", f"polygon file parse failure: {exc}") from None
    return {b: FlexibilityArea.from_json_dict(d) for b, d in doc.items()}

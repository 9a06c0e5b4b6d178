"""Acceptance criteria, one PASS/FAIL line each.

Run under pytest (lines appear in the live output) or directly with
``python3 tests/test_acceptance.py``.
"""

import contextlib
import functools
import io
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from shapely.geometry import MultiPoint, Polygon

sys.path.insert(0, str(Path(__file__).parent))

from gridflex import cli  # noqa: E402
from gridflex.flexibility import sweep_flexibility_area  # noqa: E402
from gridflex.grid import load_network_file  # noqa: E402
from gridflex.mvopf import (  # noqa: E402
    ObjectiveWeights,
    build_socp,
    check_soc_tightness,
    robustify,
    setpoint_values,
    solve_mv_opf,
    uncertainty_from_forecasts,
)
from gridflex.powerflow import finite_diff_sensitivities, solve_bfs  # noqa: E402
from gridflex.runner import _load_inputs, load_config, run_scenario  # noqa: E402
from gridflex.sensitivity import (  # noqa: E402
    estimate_from_measurements,
    injections_from_series,
    operating_point_from_series,
    read_measurements_csv,
)

from oracles import brute_force_cloud  # noqa: E402

DATA = Path(__file__).resolve().parents[1] / "src" / "gridflex" / "data"
LV_NAMES = ("lv_a", "lv_b", "lv_c")
SENS_ATTRS = ("k_vp", "k_vq", "k_ip", "k_iq", "k_sp", "k_sq", "k_qp", "k_qq")
T0 = time.perf_counter()


@functools.lru_cache(maxsize=None)
def _lv(name):
    m = load_network_file(DATA / f"{name}.json")
    series = read_measurements_csv((DATA / f"{name}_measurements.csv").read_text())
    return m, series


@functools.lru_cache(maxsize=None)
def _estimated(name):
    m, series = _lv(name)
    sens = estimate_from_measurements(series, "L0")
    return m, sens, operating_point_from_series(series, "L0"), injections_from_series(series, "L0")


@functools.lru_cache(maxsize=None)
def _scenario(name):
    cfg = load_config(DATA / f"{name}.json")
    mv, _, fc = _load_inputs(cfg)
    rep = run_scenario(cfg)
    areas = {b: r.robust for b, r in rep.lv.items()}
    return cfg, mv, fc, areas, rep


def check_sensitivities():
    t = time.perf_counter()
    worst = 0.0
    for name in LV_NAMES:
        m, sens, _, inj = _estimated(name)
        fd = finite_diff_sensitivities(m, inj, controls=sens.control_ids)
        for a in SENS_ATTRS:
            est, ref = getattr(sens, a), getattr(fd, a)
            ratio = np.abs(est - ref) / np.maximum(0.05 * np.abs(ref), 1e-4)
            worst = max(worst, float(ratio.max()))
    dt = time.perf_counter() - t
    return worst <= 1.0 and dt < 10.0, f"worst error/tolerance {worst:.3f}, {dt:.2f} s"


def check_area_vs_brute_force():
    t = time.perf_counter()
    m, sens, base, inj = _estimated("lv_a")
    area = sweep_flexibility_area(m, sens, base, 8)
    feas, _ = brute_force_cloud(m, inj, resolution=21)
    hull = MultiPoint(feas).convex_hull
    poly = Polygon(area.vertices)
    cover = poly.intersection(hull).area / hull.area
    excess = poly.difference(hull).area / hull.area
    dt = time.perf_counter() - t
    ok = cover >= 0.98 and excess <= 0.02 and dt < 60.0
    return ok, f"coverage {cover:.4f}, excess {excess:.4f}, {len(feas)} feasible samples, {dt:.2f} s"


def check_vertex_resimulation():
    worst, n = -np.inf, 0
    for name in LV_NAMES:
        m, sens, base, inj = _estimated(name)
        area = sweep_flexibility_area(m, sens, base, 8)
        ders = {d.id: d for d in m.ders}
        for sp in area.vertex_setpoints:
            moved = dict(inj)
            for d, (dp, dq) in sp.items():
                moved[ders[d].bus] += complex(dp, dq)
            op = solve_bfs(m, moved)
            for b in m.buses:
                v = op.v_of(b.id)
                worst = max(worst, (v - b.v_max) / b.v_max, (b.v_min - v) / b.v_min)
            for br in m.branches:
                worst = max(worst, (op.i_of(br.id) - br.i_max) / br.i_max)
            n += 1
    return worst <= 0.005, f"{n} vertices, worst relative limit excess {100 * worst:.3f} %"


def check_soc_gaps():
    worst = 0.0
    for name in ("today", "future"):
        rep = _scenario(name)[4]
        for sol in (rep.robust, *rep.realizations.values()):
            worst = max(worst, check_soc_tightness(sol).max_gap)
    cfg, mv, fc, areas, _ = _scenario("today")
    loose = solve_mv_opf(build_socp(mv, fc, areas, ObjectiveWeights(w_l=0.0, w_p=0.0, w_q=0.0)))
    flagged = check_soc_tightness(loose)
    ok = worst <= 1e-6 and not flagged.tight
    return ok, f"max gap {worst:.2e}; loss-free objective flags {len(flagged.flagged)} branches (gap {flagged.max_gap:.2e})"


def check_robust_consistency():
    lines, ok = [], True
    for name in ("today", "future"):
        cfg, mv, fc, areas, _ = _scenario(name)
        prog = build_socp(mv, fc, areas, cfg.weights)
        det = solve_mv_opf(prog).objective
        for level, budget in ((cfg.alpha, 0.0), (0.0, cfg.gamma)):
            obj = solve_mv_opf(robustify(prog, uncertainty_from_forecasts(fc, level, budget))).objective
            ok &= abs(obj - det) <= 1e-8 * abs(det)
        objs = [solve_mv_opf(robustify(prog, uncertainty_from_forecasts(fc, cfg.alpha, g))).objective
                for g in (0.0, 0.5, 1.0, 2.0)]
        ok &= all(b >= a - 1e-8 * abs(a) for a, b in zip(objs, objs[1:]))
        lines.append(f"{name} objective over budget " + " ".join(f"{o:.6f}" for o in objs))
    return ok, "; ".join(lines)


def check_random_draws():
    lines, ok = [], True
    rng = np.random.default_rng(12345)
    for name in ("today", "future"):
        cfg, mv, fc, areas, rep = _scenario(name)
        rob = robustify(build_socp(mv, fc, areas, cfg.weights),
                        uncertainty_from_forecasts(fc, cfg.alpha, cfg.gamma, cfg.max_alpha))
        pins = setpoint_values(rep.robust)
        n_ok, worst = 0, 0.0
        for _ in range(100):
            w = rng.uniform(-1, 1, len(rob.unc_ids))
            w *= min(1.0, cfg.gamma / np.abs(w).sum())
            sol = solve_mv_opf(rob, w, setpoints=pins)
            n_ok += sol.optimal
            if sol.optimal:
                worst = max(worst, sol.slack_sum)
        ok &= n_ok == 100
        if name == "today":
            ok &= worst == 0.0
        lines.append(f"{name} {n_ok}/100 feasible, max slack {worst:.3g} pu2")
    return ok, "; ".join(lines)


def check_qualitative_pattern():
    today, future = _scenario("today")[4], _scenario("future")[4]
    s_t, s_f = today.doc["summary"], future.doc["summary"]
    rate = _scenario("today")[0].violation_rate
    ok = len(s_t) == 3 and all(r["violation_cost_chf"] == 0.0 for r in s_t.values())
    ok &= any(r["violation_cost_chf"] > 0 for r in s_f.values())
    ok &= s_f["expected"]["losses_kwh"] > s_t["expected"]["losses_kwh"]
    # recompute the cost from the per-element slacks written to the report
    for rep in (today, future):
        for sol in rep.doc["realizations"].values():
            slack = sum(b["V_dev_pu2"] for b in sol["buses"].values())
            slack += sum(b["I_dev_pu2"] for b in sol["branches"].values())
            ok &= abs(sol["violation_cost_chf"] - rate * slack) <= 1e-12 * max(1.0, rate * slack)
    cost = " ".join(f"{k} {r['violation_cost_chf']:.3f}" for k, r in s_f.items())
    return ok, (f"today costs all zero: {all(r['violation_cost_chf'] == 0 for r in s_t.values())}; "
                f"future costs {cost}; losses today {s_t['expected']['losses_kwh']:.2f} kWh, "
                f"future {s_f['expected']['losses_kwh']:.2f} kWh")


def check_future_losses():
    s = _scenario("future")[4].doc["summary"]
    loss = {k: r["losses_kwh"] for k, r in s.items()}
    ok = set(loss) == {"lower", "expected", "upper"}
    ok &= loss.get("lower", -1) >= 0 and loss.get("upper", -1) >= 0
    ok &= max(loss.values()) > loss.get("expected", np.inf)
    return ok, " ".join(f"{k} {v:.3f} kWh" for k, v in loss.items())


def check_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for k in range(2):
            out = Path(tmp) / f"run{k}"
            with contextlib.redirect_stdout(io.StringIO()):
                code = cli.main(["run", "--config", str(DATA / "today.json"), "--out", str(out)])
            if code != 0:
                return False, f"exit code {code}"
            outs.append((out / "report.json").read_bytes())
    return outs[0] == outs[1], f"{len(outs[0])} bytes, identical: {outs[0] == outs[1]}"


def check_runtime():
    dt = time.perf_counter() - T0
    return dt < 300.0, f"{dt:.1f} s for the whole acceptance suite"


CRITERIA = [
    ("sensitivities", "regression sensitivities within 5 % or 1e-4 of finite differences, < 10 s",
     check_sensitivities),
    ("area", "lv_a 8-direction polygon vs 21x21 brute force: coverage >= 98 %, excess <= 2 %, < 60 s",
     check_area_vs_brute_force),
    ("vertices", "polygon vertices re-simulated violate no limit by more than 0.5 %", check_vertex_resimulation),
    ("soc", "cone gaps <= 1e-6 with loss penalty; loss-free counterexample flagged", check_soc_gaps),
    ("robust", "zero budget / zero level match deterministic to 1e-8; objective nondecreasing in budget",
     check_robust_consistency),
    ("draws", "robust setpoints hard-feasible under 100 random admissible draws", check_random_draws),
    ("pattern", "today no violations, future violates, future losses higher, cost = 100 x slack sum",
     check_qualitative_pattern),
    ("future-losses", "future losses at w = -1, +1 are >= 0 and their maximum exceeds w = 0",
     check_future_losses),
    ("determinism", "two CLI runs give byte-identical reports", check_determinism),
    ("runtime", "whole suite under 5 minutes", check_runtime),
]


def _line(key, desc, fn):
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a FAIL line, not a missing one
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return ok, f"{'PASS' if ok else 'FAIL'} [{key}] {desc} :: {detail}"


@pytest.mark.parametrize("key,desc,fn", CRITERIA, ids=[c[0] for c in CRITERIA])
def test_criterion(key, desc, fn, capsys):
    ok, line = _line(key, desc, fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [_line(*c) for c in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)

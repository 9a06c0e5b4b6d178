import json
import math

import numpy as np
import pytest

from gridflex.flexibility import FlexibilityArea
from gridflex.geometry import halfplanes
from gridflex.grid import load_network
from gridflex.mvopf import (
    MvOpfSolution,
    NodeForecast,
    ObjectiveWeights,
    OpfError,
    build_socp,
    check_soc_tightness,
    realize,
    robustify,
    setpoint_values,
    solve_mv_opf,
    uncertainty_from_forecasts,
    violation_cost,
)
from gridflex.powerflow import losses, solve_bfs
from gridflex.runner import _load_inputs, load_config, run_scenario
from gridflex.uncertainty import UncertaintyModel

from conftest import DATA, two_bus_doc

GAMMAS = (0.0, 0.5, 1.0, 2.0)


@pytest.fixture(scope="module")
def today():
    cfg = load_config(DATA / "today.json")
    mv, _, fc = _load_inputs(cfg)
    rep = run_scenario(cfg)
    areas = {b: r.robust for b, r in rep.lv.items()}
    return cfg, mv, fc, areas, rep


def _det(today, weights=None):
    cfg, mv, fc, areas, _ = today
    return build_socp(mv, fc, areas, weights or cfg.weights)


def _point(p, q):
    v = np.array([[p, q]])
    return FlexibilityArea(v, (p, q), halfplanes(v))


def test_two_bus_no_load(two_bus):
    sol = solve_mv_opf(build_socp(two_bus, {}, {}))
    assert sol.optimal
    assert sol.v["B2"] == pytest.approx(1.0, abs=1e-8)
    assert abs(sol.P["B1-B2"]) < 1e-8 and abs(sol.Q["B1-B2"]) < 1e-8
    assert abs(sol.objective) < 1e-8
    # zero flow: the cone is trivially tight and nothing is flagged
    assert check_soc_tightness(sol).tight


def test_two_bus_load_matches_power_flow(two_bus):
    sol = solve_mv_opf(build_socp(two_bus, {"B2": NodeForecast(p_load=0.1)}, {}))
    op = solve_bfs(two_bus, {"B2": -0.1 + 0j})
    assert check_soc_tightness(sol).max_gap <= 1e-6
    assert math.sqrt(sol.v["B2"]) == pytest.approx(op.v_of("B2"), abs=1e-7)
    assert sol.losses_pu == pytest.approx(losses(two_bus, op), rel=1e-5)
    assert sol.p_slack == pytest.approx(op.p_slack, abs=1e-8)


def test_point_area_pins_transfer(mv_feeder):
    areas = {b: _point(0.05 * k, -0.01 * k) for k, b in enumerate(sorted(mv_feeder.attached_lv_grids), 1)}
    sol = solve_mv_opf(build_socp(mv_feeder, {}, areas))
    assert sol.optimal
    for b, a in areas.items():
        np.testing.assert_allclose(sol.transfers[b], a.base, atol=1e-7)


def test_input_errors(mv_feeder, two_bus):
    with pytest.raises(OpfError, match="no flexibility area"):
        build_socp(mv_feeder, {}, {})
    with pytest.raises(OpfError, match="non-negative"):
        ObjectiveWeights(w_l=-1.0)
    with pytest.raises(OpfError, match="unknown bus"):
        build_socp(two_bus, {"ZZ": NodeForecast()}, {})
    with pytest.raises(ValueError):
        UncertaintyModel(0.5, -1.0)


def test_robustify_identity(today):
    cfg, mv, fc, _, _ = today
    prog = _det(today)
    base = solve_mv_opf(prog)
    for level, budget in ((0.5, 0.0), (0.0, 1.0)):
        rob = robustify(prog, uncertainty_from_forecasts(fc, level, budget))
        np.testing.assert_array_equal(rob.h, prog.h)
        sol = solve_mv_opf(rob)
        assert abs(sol.objective - base.objective) <= 1e-8 * abs(base.objective)


def test_single_node_tightening():
    doc = two_bus_doc(ders=[{"id": "g", "bus": "B2", "p_max": 5.0, "q_min": -1.0, "q_max": 1.0,
                             "curtailable_fraction": 0.2}])
    m = load_network(json.dumps(doc))
    fc = {"B2": NodeForecast(p_gen_mid=3.0, p_gen_halfwidth=2.0, p_load=1.0)}
    prog = build_socp(m, fc, {})
    rob = robustify(prog, UncertaintyModel(1.0, 0.5, {"B2": (2.0, 0.0)}))
    labels = prog.meta["le_labels"]
    r = labels.index("p_max[g]")
    assert prog.h[r] - rob.h[r] == pytest.approx(1.0)
    assert rob.h[labels.index("p_min[g]")] == pytest.approx(-1.0)
    # rows without uncertainty are untouched
    assert rob.h[labels.index("p_avail[g]")] == prog.h[labels.index("p_avail[g]")]


def test_objective_monotone_in_budget(today):
    cfg, mv, fc, _, _ = today
    prog = _det(today)
    nominal = solve_mv_opf(prog).objective
    objs = [solve_mv_opf(robustify(prog, uncertainty_from_forecasts(fc, cfg.alpha, g))).objective for g in GAMMAS]
    assert objs[0] == pytest.approx(nominal, rel=1e-8)
    for a, b in zip(objs, objs[1:]):
        assert b >= a - 1e-8 * abs(a)
    assert objs[-1] > nominal


def test_realize_rejects_inadmissible(today):
    cfg, _, fc, _, _ = today
    rob = robustify(_det(today), uncertainty_from_forecasts(fc, cfg.alpha, cfg.gamma))
    n = len(rob.unc_ids)
    with pytest.raises(OpfError, match="outside"):
        realize(rob, np.ones(n))
    with pytest.raises(OpfError, match="entries"):
        realize(rob, np.zeros(n + 1))
    with pytest.raises(OpfError, match="non-uncertain"):
        realize(rob, {"M0": 0.1})


def test_random_draws_stay_feasible(today):
    cfg, _, fc, _, rep = today
    rob = robustify(_det(today), uncertainty_from_forecasts(fc, cfg.alpha, cfg.gamma))
    pins = setpoint_values(rep.robust)
    rng = np.random.default_rng(2024)
    for _ in range(100):
        w = rng.uniform(-1, 1, len(rob.unc_ids))
        w *= min(1.0, cfg.gamma / np.abs(w).sum())
        sol = solve_mv_opf(rob, w, setpoints=pins)
        assert sol.optimal, sol.diagnostics
        assert sol.slack_sum == 0.0


def test_pinned_violation_reports_rows(today):
    cfg, _, fc, _, rep = today
    pins = setpoint_values(rep.robust)
    pins["p_der[wind_M4]"] = 10.0
    sol = solve_mv_opf(_det(today), setpoints=pins)
    assert sol.status == "infeasible"
    assert "p_avail[wind_M4]" in sol.diagnostics[0]


def test_loss_free_objective_breaks_tightness(today):
    sol = solve_mv_opf(_det(today, ObjectiveWeights(w_l=0.0, w_p=0.0, w_q=0.0)))
    report = check_soc_tightness(sol)
    assert not report.tight and report.max_gap > 1e-6
    tight = check_soc_tightness(solve_mv_opf(_det(today)))
    assert tight.tight and tight.max_gap <= 1e-6


def test_voltage_drop_telescopes(today):
    _, mv, _, _, rep = today
    sol = rep.robust
    topo = mv.topology
    for bus in mv.bus_ids:
        path = topo.path_to_root(bus)
        drop = 0.0
        for brid in path:
            br = mv.branches[mv.branch_index[brid]]
            drop += 2 * (br.r * sol.P[brid] + br.x * sol.Q[brid]) - (br.r**2 + br.x**2) * sol.l[brid]
        assert sol.v[bus] == pytest.approx(sol.v[mv.slack.id] - drop, abs=1e-9)


def test_objective_decomposition(today):
    sol = today[4].robust
    assert sum(sol.terms.values()) == pytest.approx(sol.objective, abs=1e-10)
    assert sol.objective == pytest.approx(sol.result.objective, abs=1e-6)


def test_violation_cost_linear():
    sol = MvOpfSolution("optimal", 0.0, {}, {}, {}, {}, {}, {"a": 1.0}, {"b": 0.16176}, {}, {}, 0.0, 0.0, 0.0)
    assert violation_cost(sol) == pytest.approx(116.176)
    assert violation_cost(sol, 50.0) == pytest.approx(58.088)
    assert violation_cost(sol, 0.0) == 0.0


def test_setpoints_audited_by_power_flow(today):
    _, mv, fc, _, rep = today
    sol = rep.realizations["expected"]
    inj = {}
    for b in mv.bus_ids:
        if b == mv.slack.id:
            continue
        f = fc.get(b, NodeForecast())
        s = complex(-f.p_load, -f.q_load)
        if b in sol.transfers:
            s -= complex(*sol.transfers[b])
        ders = mv.ders_at(b)
        for d in ders:
            s += complex(*sol.der_setpoints[d.id])
        if not ders and b not in sol.transfers:
            s += complex(f.p_gen_mid, f.q_gen_mid)
        inj[b] = s
    op = solve_bfs(mv, inj)
    assert op.converged
    for bus in mv.buses:
        assert op.v_of(bus.id) == pytest.approx(math.sqrt(sol.v[bus.id]), abs=1e-6)
        assert bus.v_min - 1e-6 <= op.v_of(bus.id) <= bus.v_max + 1e-6
    for br in mv.branches:
        assert op.i_of(br.id) <= br.i_max * (1 + 1e-6)
    assert losses(mv, op) == pytest.approx(sol.losses_pu, rel=1e-5)

import dataclasses
import json
import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from gridflex.flexibility import (
    DirectionWeights,
    FlexibilityArea,
    apply_worst_case_shift,
    build_direction_lp,
    polygon_to_halfplanes,
    robust_transfer_area,
    solve_direction,
    sweep_directions,
    sweep_flexibility_area,
)
from gridflex.geometry import halfplanes
from gridflex.grid import GridModel, load_network
from gridflex.powerflow import finite_diff_sensitivities, solve_bfs
from gridflex.uncertainty import UncertaintyModel

from conftest import two_bus_doc
from oracles import brute_force_cloud

PV = {"id": "pv", "bus": "B2", "p_max": 0.05, "q_min": -0.02, "q_max": 0.02, "curtailable_fraction": 0.1}


def _pv_case(load=0.08):
    doc = two_bus_doc(ders=[PV])
    doc["buses"][1]["p_load"] = load
    doc["buses"][1]["q_load"] = 0.3 * load
    m = load_network(json.dumps(doc))
    inj = m.injections()
    return m, finite_diff_sensitivities(m, inj), solve_bfs(m, inj), inj


def _poly(area):
    return Polygon(area.vertices)


def test_direction_weights():
    with pytest.raises(ValueError):
        DirectionWeights(0, 0)
    eight = {(w.alpha_dir, w.beta_dir) for w in sweep_directions(8)}
    assert eight == {(a, b) for a in (-1.0, 0.0, 1.0) for b in (-1.0, 0.0, 1.0)} - {(0.0, 0.0)}


def test_no_ders_gives_point(two_bus):
    inj = {"B2": -0.05 + 0j}
    sens = finite_diff_sensitivities(two_bus, inj)
    base = solve_bfs(two_bus, inj)
    prob = build_direction_lp(two_bus, sens, base, DirectionWeights(1, 0))
    assert prob.n_vars == 0
    tp = solve_direction(prob)
    assert (tp.p, tp.q) == (base.p_slack, base.q_slack)
    area = sweep_flexibility_area(two_bus, sens, base)
    assert area.degenerate and area.area == 0.0
    assert area.contains(base.p_slack, base.q_slack)


def test_single_pv_curtailment_direction():
    m, sens, base, inj = _pv_case()
    feas, _ = brute_force_cloud(m, inj, resolution=11)
    # +p raises the import into the grid, i.e. curtails the PV
    up = solve_direction(build_direction_lp(m, sens, base, DirectionWeights(1, 0)))
    assert up.setpoints["pv"][0] == pytest.approx(-0.005, abs=1e-9)
    # linearization error is second order in the 0.005 pu step
    assert up.p == pytest.approx(feas[:, 0].max(), abs=1e-5)
    down = solve_direction(build_direction_lp(m, sens, base, DirectionWeights(-1, 0)))
    assert down.setpoints["pv"][0] == pytest.approx(0.0, abs=1e-9)
    assert down.p == pytest.approx(feas[:, 0].min(), abs=1e-5)


def test_single_pv_q_direction_saturates():
    m, sens, base, inj = _pv_case()
    feas, _ = brute_force_cloud(m, inj, resolution=11)
    tp = solve_direction(build_direction_lp(m, sens, base, DirectionWeights(0, 1)))
    assert tp.setpoints["pv"][1] == pytest.approx(-0.02, abs=1e-9)
    assert tp.q == pytest.approx(feas[:, 1].max(), abs=1e-5)


def test_q_direction_stops_at_voltage_limit():
    m, sens, base, inj = _pv_case()
    v2 = base.v_of("B2")
    # a lower limit just below the base voltage binds before q_min is reached
    buses = (m.buses[0], dataclasses.replace(m.buses[1], v_min=v2 - 1e-4))
    tight = GridModel(buses, m.branches, m.ders, m.s_base)
    tp = solve_direction(build_direction_lp(tight, sens, base, DirectionWeights(0, 1)))
    dq = tp.setpoints["pv"][1]
    assert -0.02 < dq < 0
    k = sens.column("B2")
    assert v2 + sens.k_vq[1, k] * dq + sens.k_vp[1, k] * tp.setpoints["pv"][0] == pytest.approx(v2 - 1e-4, abs=1e-9)


def test_single_pv_area_is_centrally_symmetric():
    # linear image of the symmetric capability box: a parallelogram
    m, sens, base, _ = _pv_case()
    area = sweep_flexibility_area(m, sens, base, 8)
    assert len(area.vertices) == 4
    c = area.vertices.mean(axis=0)
    k = sens.column("B2")
    np.testing.assert_allclose(c, [base.p_slack + sens.k_sp[k] * -0.0025, base.q_slack + sens.k_qp[k] * -0.0025],
                               atol=1e-8)
    for v in area.vertices:
        assert area.contains(*(2 * c - v), tol=1e-8)


def test_base_violation_flagged():
    m, sens, base, _ = _pv_case(load=0.08)
    buses = (m.buses[0], dataclasses.replace(m.buses[1], v_min=0.9999))
    tight = GridModel(buses, m.branches, m.ders, m.s_base)
    prob = build_direction_lp(tight, sens, base, DirectionWeights(1, 0))
    assert prob.base_violations == ["B2"]
    area = sweep_flexibility_area(tight, sens, base)
    assert area.degenerate
    assert any("outside limits" in d for d in area.diagnostics)


def test_sweep_needs_four_directions(lv_a):
    sens = finite_diff_sensitivities(lv_a, lv_a.injections())
    with pytest.raises(ValueError):
        sweep_flexibility_area(lv_a, sens, solve_bfs(lv_a), 3)


@pytest.fixture(scope="module")
def lv_case(lv_a):
    inj = lv_a.injections()
    return lv_a, finite_diff_sensitivities(lv_a, inj), solve_bfs(lv_a, inj)


def test_halfplanes_describe_vertices(lv_case):
    m, sens, base = lv_case
    area = sweep_flexibility_area(m, sens, base)
    hp = polygon_to_halfplanes(area)
    for v in area.vertices:
        assert np.all(hp[:, :2] @ v <= hp[:, 2] + 1e-9)
    assert area.contains(base.p_slack, base.q_slack)
    np.testing.assert_allclose(hp, area.half_planes)


def test_refinement_8_within_32(lv_case):
    m, sens, base = lv_case
    a8 = sweep_flexibility_area(m, sens, base, 8)
    a32 = sweep_flexibility_area(m, sens, base, 32)
    assert len(a8.vertices) <= 9
    hp = a32.half_planes
    for v in a8.vertices:
        assert np.all(hp[:, :2] @ v <= hp[:, 2] + 1e-7)
    assert (a32.area - a8.area) / a32.area <= 0.05


def test_monotone_in_capability(lv_case):
    m, sens, base = lv_case
    small = sweep_flexibility_area(m, sens, base)
    bigger = GridModel(m.buses, m.branches,
                       [dataclasses.replace(d, q_max=2 * d.q_max, curtailable_fraction=0.3) for d in m.ders],
                       m.s_base)
    big = sweep_flexibility_area(bigger, sens, base)
    for v in small.vertices:
        assert big.contains(*v, tol=1e-7)


def test_vertex_resimulation(lv_case):
    m, sens, base = lv_case
    area = sweep_flexibility_area(m, sens, base)
    inj0 = m.injections()
    ders = {d.id: d for d in m.ders}
    for sp in area.vertex_setpoints:
        inj = dict(inj0)
        for d, (dp, dq) in sp.items():
            inj[ders[d].bus] += complex(dp, dq)
        op = solve_bfs(m, inj)
        for b in m.buses:
            assert op.v_of(b.id) <= b.v_max * 1.005 and op.v_of(b.id) >= b.v_min * 0.995
        for br in m.branches:
            assert op.i_of(br.id) <= br.i_max * 1.005


def test_worst_case_shift(lv_case):
    m, sens, base = lv_case
    hw = {d.bus: (0.3 * d.p_max, 0.0) for d in m.ders}
    assert apply_worst_case_shift(base, sens, UncertaintyModel(0.0, 1.0, hw), 1) is base
    unc = UncertaintyModel(0.5, 1.0, hw)
    nominal = sweep_flexibility_area(m, sens, base)
    plus = sweep_flexibility_area(m, sens, apply_worst_case_shift(base, sens, unc, 1))
    minus = sweep_flexibility_area(m, sens, apply_worst_case_shift(base, sens, unc, -1))
    assert plus.base != nominal.base and minus.base != nominal.base
    both = _poly(plus).intersection(_poly(minus))
    assert both.difference(_poly(nominal)).area <= 1e-9
    with pytest.raises(ValueError):
        apply_worst_case_shift(base, sens, unc, 0)


def test_robust_transfer_area(lv_case):
    m, sens, base = lv_case
    hw = {d.bus: (0.3 * d.p_max, 0.0) for d in m.ders}
    unc = UncertaintyModel(0.5, 1.0, hw)
    nominal = sweep_flexibility_area(m, sens, base)
    shifted = [sweep_flexibility_area(m, sens, apply_worst_case_shift(base, sens, unc, s)) for s in (1, -1)]
    rob = robust_transfer_area(nominal, shifted)
    assert rob.area <= nominal.area + 1e-12
    assert rob.area > 0.5 * nominal.area
    for v in rob.vertices:
        assert np.all(rob.half_planes[:, :2] @ v <= rob.half_planes[:, 2] + 1e-9)


def test_robust_area_empty_pins_base():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    nominal = FlexibilityArea(sq, (0.5, 0.5), halfplanes(sq))
    far = sq + 5.0
    shifted = FlexibilityArea(far, (0.5, 0.5), halfplanes(far))
    rob = robust_transfer_area(nominal, [shifted])
    assert rob.degenerate and tuple(rob.vertices[0]) == (0.5, 0.5)
    assert any("empty" in d for d in rob.diagnostics)


def test_csv_and_json_round_trip(lv_case):
    m, sens, base = lv_case
    area = sweep_flexibility_area(m, sens, base)
    text = area.to_csv()
    assert text.splitlines()[0] == "direction_deg,p_pu,q_pu"
    back = FlexibilityArea.from_csv(text, area.base, area.s_base)
    np.testing.assert_array_equal(back.vertices, area.vertices)
    doc = json.loads(json.dumps(area.to_json_dict()))
    again = FlexibilityArea.from_json_dict(doc)
    np.testing.assert_array_equal(again.vertices, area.vertices)
    np.testing.assert_array_equal(again.half_planes, area.half_planes)


def test_degenerate_csv_single_row():
    pt = np.array([[0.1, 0.2]])
    area = FlexibilityArea(pt, (0.1, 0.2), halfplanes(pt), vertex_directions=(math.nan,))
    assert len(area.to_csv().splitlines()) == 2


def test_rescaled(lv_case):
    m, sens, base = lv_case
    area = sweep_flexibility_area(m, sens, base)
    mv = area.rescaled(1.0)
    assert mv.area == pytest.approx(area.area * (m.s_base / 1.0) ** 2)
    for v in mv.vertices:
        assert mv.contains(*v)

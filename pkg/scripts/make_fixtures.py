"""Regenerate the bundled synthetic fixtures under src/gridflex/data.

A 6-bus 20 kV feeder with three 4-bus 0.4 kV LV grids (200 kWp PV in total)
and a wind unit on the MV side.  Measurement series are synthesised from
the LV models with a fixed seed, so the output is reproducible.
"""

from __future__ import annotations

import json
from pathlib import Path

from gridflex.grid import load_network
from gridflex.sensitivity import synthesize_measurements, write_measurements_csv

DATA = Path(__file__).resolve().parents[1] / "src" / "gridflex" / "data"

UNITS = {"power": "kW", "impedance": "ohm", "current": "A"}
LV_BRANCHES = [(0.006, 0.003, 400), (0.018, 0.008, 300), (0.025, 0.01, 250)]

# name -> (loads kW at L1..L3, [(bus, kWp)])
LV_GRIDS = {
    "lv_a": ([40, 35, 60], [("L2", 30), ("L3", 40)]),
    "lv_b": ([30, 50, 60], [("L2", 25), ("L3", 35)]),
    "lv_c": ([45, 40, 55], [("L2", 35), ("L3", 35)]),
}
LV_AT = {"M2": "lv_a", "M3": "lv_b", "M5": "lv_c"}


def lv_doc(name, loads, pvs):
    return {
        "name": name,
        "units": UNITS,
        "s_base_mva": 0.05,
        "buses": [{"id": "L0", "kind": "slack", "v_min": 0.95, "v_max": 1.05, "base_kv": 0.4}]
        + [
            {"id": f"L{k}", "kind": "pq", "v_min": 0.95, "v_max": 1.05, "base_kv": 0.4,
             "p_load": loads[k - 1], "q_load": round(0.3 * loads[k - 1], 6)}
            for k in (1, 2, 3)
        ],
        "branches": [
            {"id": f"l{k}{k + 1}", "from_bus": f"L{k}", "to_bus": f"L{k + 1}", "r": r, "x": x, "i_max": i}
            for k, (r, x, i) in enumerate(LV_BRANCHES)
        ],
        "ders": [
            {"id": f"pv_{b}", "bus": b, "p_max": p, "q_min": -0.2 * p, "q_max": 0.2 * p,
             "curtailable_fraction": 0.1}
            for b, p in pvs
        ],
    }


MV_DOC = {
    "name": "mv_feeder",
    "units": UNITS,
    "s_base_mva": 1.0,
    "buses": [{"id": "M0", "kind": "slack", "v_min": 0.95, "v_max": 1.05, "base_kv": 20.0}]
    + [{"id": f"M{k}", "kind": "pq", "v_min": 0.95, "v_max": 1.05, "base_kv": 20.0} for k in range(1, 6)],
    "branches": [
        {"id": "M0-M1", "from_bus": "M0", "to_bus": "M1", "r": 1.6, "x": 1.2, "i_max": 31.0},
        {"id": "M1-M2", "from_bus": "M1", "to_bus": "M2", "r": 2.4, "x": 1.6, "i_max": 25.0},
        {"id": "M2-M3", "from_bus": "M2", "to_bus": "M3", "r": 2.0, "x": 1.4, "i_max": 20.0},
        {"id": "M1-M4", "from_bus": "M1", "to_bus": "M4", "r": 2.8, "x": 1.9, "i_max": 25.0},
        {"id": "M4-M5", "from_bus": "M4", "to_bus": "M5", "r": 2.2, "x": 1.5, "i_max": 20.0},
    ],
    "ders": [
        {"id": "wind_M4", "bus": "M4", "p_max": 300.0, "q_min": -100.0, "q_max": 100.0,
         "curtailable_fraction": 0.2}
    ],
    "attached_lv_grids": {bus: f"{name}.json" for bus, name in LV_AT.items()},
}

# bus, p_gen_mid_kw, q_gen_mid_kvar, p_gen_halfwidth_kw, q_gen_halfwidth_kvar, p_load_kw, q_load_kvar
FORECASTS = [
    ("M1", 0, 0, 0, 0, 300, 90),
    ("M2", 70, 0, 14, 0, 150, 45),
    ("M3", 60, 0, 12, 0, 100, 30),
    ("M4", 280, 0, 80, 0, 80, 24),
    ("M5", 70, 0, 14, 0, 150, 45),
]


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    for name, (loads, pvs) in LV_GRIDS.items():
        doc = lv_doc(name, loads, pvs)
        text = json.dumps(doc, indent=2) + "\n"
        (DATA / f"{name}.json").write_text(text)
        model = load_network(text, name)
        series = synthesize_measurements(model, n_samples=200, sigma=0.01, seed=sum(map(ord, name)))
        (DATA / f"{name}_measurements.csv").write_text(write_measurements_csv(series))
    (DATA / "mv_feeder.json").write_text(json.dumps(MV_DOC, indent=2) + "\n")
    lines = ["bus_id,p_gen_mid_kw,q_gen_mid_kvar,p_gen_halfwidth_kw,q_gen_halfwidth_kvar,p_load_kw,q_load_kvar"]
    lines += [",".join(str(v) for v in row) for row in FORECASTS]
    (DATA / "forecasts.csv").write_text("\n".join(lines) + "\n")
    base = {
        "mv_network": "mv_feeder.json",
        "forecasts": "forecasts.csv",
        "measurements": {bus: f"{name}_measurements.csv" for bus, name in LV_AT.items()},
        "alpha": 0.5,
        "gamma": 1.0,
        "directions": 8,
        "violation_rate": 100.0,
        "horizon_hours": 24.0,
    }
    (DATA / "today.json").write_text(json.dumps({**base, "label": "today"}, indent=2) + "\n")
    (DATA / "future.json").write_text(
        json.dumps({**base, "label": "future", "future_load_kw": 100.0}, indent=2) + "\n")


if __name__ == "__main__":
    main()

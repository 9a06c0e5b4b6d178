import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridflex.grid import load_network, load_network_file  # noqa: E402

DATA = Path(__file__).resolve().parents[1] / "src" / "gridflex" / "data"


def two_bus_doc(r=0.01, x=0.02, i_max=2.0, ders=()):
    return {
        "units": "pu",
        "s_base_mva": 1.0,
        "buses": [
            {"id": "B1", "kind": "slack", "v_min": 0.9, "v_max": 1.1, "base_kv": 20.0},
            {"id": "B2", "kind": "pq", "v_min": 0.9, "v_max": 1.1, "base_kv": 20.0},
        ],
        "branches": [{"id": "B1-B2", "from_bus": "B1", "to_bus": "B2", "r": r, "x": x, "i_max": i_max}],
        "ders": list(ders),
    }


@pytest.fixture
def two_bus():
    return load_network(json.dumps(two_bus_doc()))


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def lv_a():
    return load_network_file(DATA / "lv_a.json")


@pytest.fixture(scope="session")
def lv_grids():
    return {name: load_network_file(DATA / f"{name}.json") for name in ("lv_a", "lv_b", "lv_c")}


@pytest.fixture(scope="session")
def mv_feeder():
    return load_network_file(DATA / "mv_feeder.json")

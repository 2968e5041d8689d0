import pytest
import yaml

from dersim import network
from dersim.network import NetworkError, derive_transformer_capacities

from conftest import feeder_bytes

MINIMAL = """
meta: {version: 1, name: mini}
buses:
  - {id: s, phases: A, base_voltage: 240.0, source: true}
  - {id: m, phases: A, base_voltage: 240.0}
lines:
  - {id: l1, from: s, to: m, phases: A, r_ohm: 0.05, x_ohm: 0.1}
loads:
  - {node: m.A, class: residential, peak_kw: 3.0}
"""

CYCLE = """
meta: {version: 1, name: loop}
buses:
  - {id: a, phases: A, base_voltage: 240.0, source: true}
  - {id: b, phases: A, base_voltage: 240.0}
  - {id: c, phases: A, base_voltage: 240.0}
lines:
  - {id: l1, from: a, to: b, phases: A, r_ohm: 0.1, x_ohm: 0.1}
  - {id: l2, from: b, to: c, phases: A, r_ohm: 0.1, x_ohm: 0.1}
  - {id: l3, from: c, to: a, phases: A, r_ohm: 0.1, x_ohm: 0.1}
loads:
  - {node: c.A, class: residential, peak_kw: 2.0}
"""


def test_minimal_two_bus_feeder():
    m = network.parse_network(MINIMAL)
    assert m.n_nodes == 2
    assert m.consumer_nodes == ["m.A"]
    assert m.nodes["m.A"].consumer_class == "residential"


def test_cycle_rejected():
    with pytest.raises(NetworkError, match="non-radial"):
        network.parse_network(CYCLE)


def test_missing_source_rejected():
    doc = MINIMAL.replace(", source: true", "")
    with pytest.raises(NetworkError, match="source"):
        network.parse_network(doc)


def test_dangling_load_reference():
    doc = MINIMAL.replace("m.A", "zz.A")
    with pytest.raises(NetworkError, match="zz"):
        network.parse_network(doc)


def test_bad_version():
    doc = MINIMAL.replace("version: 1", "version: 7")
    with pytest.raises(NetworkError, match="version"):
        network.parse_network(doc)


def test_sub11_counts_match_file(sub11):
    # Recount with a plain YAML walk, independent of the parser internals.
    doc = yaml.safe_load(feeder_bytes("sub11"))
    n_consumers = len(doc["loads"])
    n_tr_records = sum(len(str(t["phases"])) for t in doc["transformers"])
    n_nodes = sum(len(str(b["phases"])) for b in doc["buses"])
    assert n_consumers == 8
    summary = sub11.summary()
    assert summary["n_consumers"] == n_consumers
    assert summary["n_transformers"] == n_tr_records == 4
    assert summary["n_nodes"] == n_nodes
    assert summary["n_buses"] == len(doc["buses"]) == 11
    assert sum(summary["nodes_per_phase"].values()) == summary["n_nodes"]


def test_roundtrip_identity(sub11):
    blob = network.serialize_network(sub11)
    again = network.parse_network(blob)
    assert again.node_ids == sub11.node_ids
    assert again.buses == sub11.buses
    assert again.lines == sub11.lines
    assert again.transformers == sub11.transformers
    assert network.serialize_network(again) == blob


def test_transformer_inputs_are_upstream(sub11):
    for tin, tout in sub11.transformer_pairs:
        assert sub11.is_ancestor(tin, tout)
        assert not sub11.is_ancestor(tout, tin)


def test_derive_capacities():
    doc = yaml.safe_load(MINIMAL)
    doc["buses"].append({"id": "lv", "phases": "A", "base_voltage": 120.0})
    doc["transformers"] = [
        {"id": "t1", "from": "m", "to": "lv", "phases": "A", "r_ohm": 0.001, "x_ohm": 0.002}
    ]
    doc["loads"].append({"node": "lv.A", "class": "residential", "peak_kw": 2.0})
    m = network.parse_network(yaml.safe_dump(doc))
    assert m.transformers[0].rated_kva is None

    out = derive_transformer_capacities(m, {"t1.A": 100.0})
    assert out.transformers[0].rated_kva == pytest.approx(120.0)

    # Existing ratings untouched.
    doc["transformers"][0]["rating_kva"] = 80.0
    m2 = network.parse_network(yaml.safe_dump(doc))
    out2 = derive_transformer_capacities(m2, {"t1.A": 100.0})
    assert out2.transformers[0].rated_kva == pytest.approx(80.0)

    with pytest.raises(NetworkError, match="degenerate"):
        derive_transformer_capacities(m, {"t1.A": 0.0})
    with pytest.raises(NetworkError, match="no rating"):
        derive_transformer_capacities(m, {})

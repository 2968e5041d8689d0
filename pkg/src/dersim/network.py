"""Distribution network data model and feeder file handling.

A feeder is described by buses, lines, transformers, and consumer loads.
Phases are treated as independent single-phase circuits coupled only at the
source bus, so every bus-phase combination is a node and a 3-phase
transformer expands into three single-phase records.  The graph of lines
and transformers must form a tree rooted at the single source bus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

PHASES = ("A", "B", "C")
FEEDER_FORMAT_VERSION = 1

CONSUMER_CLASSES = ("residential", "commercial")


class NetworkError(ValueError):
    """Invalid feeder description or topology."""


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    base_voltage: float  # line-to-neutral volts
    is_source: bool = False


@dataclass(frozen=True)
class Node:
    """A bus-phase combination; the atomic voltage/load point."""

    bus_id: str
    phase: str
    kind: str = "internal"  # "consumer" | "internal"
    consumer_class: str = "none"  # "residential" | "commercial" | "none"
    peak_load: float = 0.0  # kW, average daily peak (consumers only)

    @property
    def id(self) -> str:
        return f"{self.bus_id}.{self.phase}"


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    r_ohm: float
    x_ohm: float


@dataclass(frozen=True)
class Transformer:
    """Single-phase transformer record (one per phase of a physical unit)."""

    id: str  # "<unit>.<phase>"
    unit: str
    from_bus: str
    to_bus: str
    phase: str
    rated_kva: float | None  # per-phase apparent power rating
    r_ohm: float  # series impedance referred to the output (to_bus) side
    x_ohm: float

    @property
    def input_node(self) -> str:
        return f"{self.from_bus}.{self.phase}"

    @property
    def output_node(self) -> str:
        return f"{self.to_bus}.{self.phase}"


@dataclass
class PhaseCircuit:
    """Flattened single-phase radial circuit for one phase.

    Nodes are ordered topologically (root first).  ``parent[k]`` is the
    circuit index of the node on the source side of node k; edge impedance
    arrays give the per-unit series impedance of the edge (parent[k], k).
    ``levels`` groups circuit indices by tree depth for vectorized sweeps.
    """

    phase: str
    bus_ids: list[str]
    parent: np.ndarray  # int32, parent[-root-] = -1
    order: np.ndarray  # int32 topological order, order[0] = root
    edge_r: np.ndarray  # float64 pu
    edge_x: np.ndarray  # float64 pu
    level_ptr: np.ndarray  # int64 CSR offsets into level_idx, by depth
    level_idx: np.ndarray  # int32 circuit indices grouped by depth

    @property
    def n(self) -> int:
        return len(self.bus_ids)


@dataclass
class NetworkModel:
    """Validated radial feeder model.

    Immutable after construction; safe to share across parallel workers.
    Node ordering is canonical: phases A, B, C, buses in topological order
    within each phase circuit.
    """

    name: str
    buses: dict[str, Bus]
    lines: list[Line]
    transformers: list[Transformer]
    source_bus: str
    source_voltage_pu: float = 1.0
    s_base_kva: float = 100.0  # per-phase power base
    nodes: dict[str, Node] = field(default_factory=dict)
    circuits: dict[str, PhaseCircuit] = field(default_factory=dict)
    node_ids: list[str] = field(default_factory=list)
    node_index: dict[str, int] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def consumer_nodes(self) -> list[str]:
        return [n for n in self.node_ids if self.nodes[n].kind == "consumer"]

    @property
    def transformer_pairs(self) -> list[tuple[str, str]]:
        """The set of (input_node, output_node) pairs for all transformers."""
        return [(t.input_node, t.output_node) for t in self.transformers]

    def node_positions(self, node_ids) -> np.ndarray:
        return np.array([self.node_index[n] for n in node_ids], dtype=np.int64)

    def is_ancestor(self, node_a: str, node_b: str) -> bool:
        """True if node_a lies on the path from the source to node_b."""
        bus_a, phase_a = node_a.split(".")
        bus_b, phase_b = node_b.split(".")
        if phase_a != phase_b:
            return False
        circ = self.circuits[phase_a]
        pos = {b: i for i, b in enumerate(circ.bus_ids)}
        k = pos[bus_b]
        target = pos[bus_a]
        while k != -1:
            if k == target:
                return True
            k = int(circ.parent[k])
        return False

    def summary(self) -> dict:
        per_phase = {
            ph: sum(1 for n in self.node_ids if n.endswith("." + ph)) for ph in PHASES
        }
        return {
            "name": self.name,
            "n_buses": len(self.buses),
            "n_nodes": self.n_nodes,
            "n_consumers": len(self.consumer_nodes),
            "n_transformers": len(self.transformers),
            "n_lines": len(self.lines),
            "nodes_per_phase": per_phase,
        }


def _phases_tuple(raw, where: str) -> tuple[str, ...]:
    if isinstance(raw, str):
        items = tuple(raw.upper())
    elif isinstance(raw, (list, tuple)):
        items = tuple(str(p).upper() for p in raw)
    else:
        raise NetworkError(f"{where}: phases must be a string like 'ABC'")
    if not items:
        raise NetworkError(f"{where}: phases must be nonempty")
    bad = [p for p in items if p not in PHASES]
    if bad:
        raise NetworkError(f"{where}: unknown phase(s) {bad}")
    if len(set(items)) != len(items):
        raise NetworkError(f"{where}: duplicate phases")
    return tuple(p for p in PHASES if p in items)


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise NetworkError(f"{where}: missing field '{key}'")
    return mapping[key]


def parse_network(file_bytes: bytes | str) -> NetworkModel:
    """Parse and validate a feeder description file.

    Raises NetworkError with the offending element id for malformed files,
    non-radial topology, missing source, or dangling references.
    """
    if isinstance(file_bytes, bytes):
        text = file_bytes.decode("utf-8")
    else:
        text = file_bytes
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise NetworkError(f"malformed feeder file: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkError("malformed feeder file: top level must be a mapping")

    meta = doc.get("meta", {})
    version = meta.get("version")
    if version != FEEDER_FORMAT_VERSION:
        raise NetworkError(f"unsupported feeder format version {version!r}")
    name = str(meta.get("name", "feeder"))
    s_base = float(meta.get("s_base_kva", 100.0))
    source_pu = float(meta.get("source_voltage_pu", 1.0))
    if s_base <= 0:
        raise NetworkError("meta.s_base_kva must be > 0")

    buses: dict[str, Bus] = {}
    for raw in doc.get("buses", []) or []:
        bid = str(_require(raw, "id", "bus"))
        if bid in buses:
            raise NetworkError(f"bus {bid}: duplicate id")
        base_v = float(_require(raw, "base_voltage", f"bus {bid}"))
        if base_v <= 0:
            raise NetworkError(f"bus {bid}: base_voltage must be > 0")
        buses[bid] = Bus(
            id=bid,
            phases=_phases_tuple(_require(raw, "phases", f"bus {bid}"), f"bus {bid}"),
            base_voltage=base_v,
            is_source=bool(raw.get("source", False)),
        )
    if not buses:
        raise NetworkError("feeder has no buses")

    sources = [b.id for b in buses.values() if b.is_source]
    if len(sources) != 1:
        raise NetworkError(f"feeder must have exactly one source bus, found {sources}")
    source_bus = sources[0]

    lines: list[Line] = []
    seen_ids = set()
    for raw in doc.get("lines", []) or []:
        lid = str(_require(raw, "id", "line"))
        if lid in seen_ids:
            raise NetworkError(f"line {lid}: duplicate id")
        seen_ids.add(lid)
        f, t = str(_require(raw, "from", f"line {lid}")), str(_require(raw, "to", f"line {lid}"))
        for b in (f, t):
            if b not in buses:
                raise NetworkError(f"line {lid}: unknown bus {b}")
        phases = _phases_tuple(_require(raw, "phases", f"line {lid}"), f"line {lid}")
        for p in phases:
            if p not in buses[f].phases or p not in buses[t].phases:
                raise NetworkError(f"line {lid}: phase {p} not carried by both endpoints")
        if not math.isclose(buses[f].base_voltage, buses[t].base_voltage, rel_tol=1e-9):
            raise NetworkError(f"line {lid}: endpoints have different base voltages")
        r = float(_require(raw, "r_ohm", f"line {lid}"))
        x = float(raw.get("x_ohm", 0.0))
        if r < 0:
            raise NetworkError(f"line {lid}: resistance must be >= 0")
        lines.append(Line(id=lid, from_bus=f, to_bus=t, phases=phases, r_ohm=r, x_ohm=x))

    transformers: list[Transformer] = []
    for raw in doc.get("transformers", []) or []:
        unit = str(_require(raw, "id", "transformer"))
        if unit in seen_ids:
            raise NetworkError(f"transformer {unit}: duplicate id")
        seen_ids.add(unit)
        f = str(_require(raw, "from", f"transformer {unit}"))
        t = str(_require(raw, "to", f"transformer {unit}"))
        for b in (f, t):
            if b not in buses:
                raise NetworkError(f"transformer {unit}: unknown bus {b}")
        phases = _phases_tuple(
            _require(raw, "phases", f"transformer {unit}"), f"transformer {unit}"
        )
        for p in phases:
            if p not in buses[f].phases or p not in buses[t].phases:
                raise NetworkError(
                    f"transformer {unit}: phase {p} not carried by both endpoints"
                )
        rating = raw.get("rating_kva")
        if rating is not None:
            rating = float(rating)
            if rating <= 0:
                raise NetworkError(f"transformer {unit}: rating_kva must be > 0")
        ratio = raw.get("voltage_ratio")
        expected_ratio = buses[f].base_voltage / buses[t].base_voltage
        if ratio is not None and not math.isclose(float(ratio), expected_ratio, rel_tol=5e-3):
            raise NetworkError(
                f"transformer {unit}: voltage_ratio {ratio} inconsistent with "
                f"bus bases ({expected_ratio:.6g})"
            )
        r = float(raw.get("r_ohm", 0.0))
        x = float(raw.get("x_ohm", 0.0))
        if r < 0:
            raise NetworkError(f"transformer {unit}: resistance must be >= 0")
        for p in phases:
            transformers.append(
                Transformer(
                    id=f"{unit}.{p}",
                    unit=unit,
                    from_bus=f,
                    to_bus=t,
                    phase=p,
                    rated_kva=rating,
                    r_ohm=r,
                    x_ohm=x,
                )
            )

    loads = []
    seen_load_nodes = set()
    for raw in doc.get("loads", []) or []:
        node_id = str(_require(raw, "node", "load"))
        if node_id in seen_load_nodes:
            raise NetworkError(f"load {node_id}: duplicate consumer node")
        seen_load_nodes.add(node_id)
        if "." not in node_id:
            raise NetworkError(f"load {node_id}: node must be '<bus>.<phase>'")
        bus_id, phase = node_id.rsplit(".", 1)
        if bus_id not in buses:
            raise NetworkError(f"load {node_id}: unknown bus {bus_id}")
        if phase not in buses[bus_id].phases:
            raise NetworkError(f"load {node_id}: bus {bus_id} does not carry phase {phase}")
        cls = str(_require(raw, "class", f"load {node_id}"))
        if cls not in CONSUMER_CLASSES:
            raise NetworkError(f"load {node_id}: unknown consumer class {cls!r}")
        peak = float(_require(raw, "peak_kw", f"load {node_id}"))
        if peak <= 0:
            raise NetworkError(f"load {node_id}: peak_kw must be > 0")
        loads.append((bus_id, phase, cls, peak))

    model = NetworkModel(
        name=name,
        buses=buses,
        lines=lines,
        transformers=transformers,
        source_bus=source_bus,
        source_voltage_pu=source_pu,
        s_base_kva=s_base,
    )
    _build_topology(model, loads)
    return model


def _build_topology(model: NetworkModel, loads) -> None:
    """Validate radiality and build per-phase circuits and the node table."""
    buses = model.buses
    # Bus-level adjacency: one logical edge per line / transformer unit.
    adjacency: dict[str, list[tuple[str, object]]] = {b: [] for b in buses}
    edge_objects: list[tuple[str, str, object]] = []
    for ln in model.lines:
        edge_objects.append((ln.from_bus, ln.to_bus, ln))
    seen_units = set()
    for tr in model.transformers:
        if tr.unit in seen_units:
            continue
        seen_units.add(tr.unit)
        edge_objects.append((tr.from_bus, tr.to_bus, tr))
    for f, t, obj in edge_objects:
        adjacency[f].append((t, obj))
        adjacency[t].append((f, obj))

    # BFS from source; detect cycles and disconnected buses.
    parent_bus: dict[str, str | None] = {model.source_bus: None}
    parent_edge: dict[str, object] = {}
    queue = [model.source_bus]
    visited_edges = set()
    while queue:
        cur = queue.pop(0)
        for nxt, obj in adjacency[cur]:
            if id(obj) in visited_edges:
                continue
            visited_edges.add(id(obj))
            if nxt in parent_bus:
                eid = obj.id if isinstance(obj, Line) else obj.unit
                raise NetworkError(f"non-radial topology: edge {eid} closes a cycle")
            parent_bus[nxt] = cur
            parent_edge[nxt] = obj
            queue.append(nxt)
    missing = sorted(set(buses) - set(parent_bus))
    if missing:
        raise NetworkError(f"buses not connected to source: {missing}")

    # Per-phase circuits: every bus carrying phase p must reach the source
    # through edges that carry p.
    for phase in PHASES:
        members = [b for b in buses.values() if phase in b.phases]
        if not members:
            continue
        if phase not in buses[model.source_bus].phases:
            raise NetworkError(
                f"phase {phase} present at {[b.id for b in members]} "
                f"but not at source bus"
            )
        bus_ids = [model.source_bus]
        parent_idx = [-1]
        edge_r = [0.0]
        edge_x = [0.0]
        pos = {model.source_bus: 0}
        # Walk the bus tree in BFS order so parents precede children.
        order_children: dict[str, list[str]] = {b: [] for b in buses}
        for b, p in parent_bus.items():
            if p is not None:
                order_children[p].append(b)
        stack = [model.source_bus]
        bfs = []
        while stack:
            cur = stack.pop(0)
            bfs.append(cur)
            stack.extend(sorted(order_children[cur]))
        for b in bfs:
            if b == model.source_bus or phase not in buses[b].phases:
                continue
            edge = parent_edge[b]
            carried = edge.phases if isinstance(edge, Line) else (edge.phase,)
            if isinstance(edge, Transformer):
                carried = tuple(
                    t.phase for t in model.transformers if t.unit == edge.unit
                )
            if phase not in carried:
                raise NetworkError(
                    f"bus {b} carries phase {phase} but its supply edge does not"
                )
            pb = parent_bus[b]
            if pb not in pos:
                raise NetworkError(
                    f"bus {b}: parent {pb} does not carry phase {phase}"
                )
            # Per-unit impedance on the downstream bus voltage base.
            v_base = buses[b].base_voltage
            z_base = v_base * v_base / (model.s_base_kva * 1000.0)
            pos[b] = len(bus_ids)
            bus_ids.append(b)
            parent_idx.append(pos[pb])
            edge_r.append(edge.r_ohm / z_base)
            edge_x.append(edge.x_ohm / z_base)

        n = len(bus_ids)
        parent = np.asarray(parent_idx, dtype=np.int32)
        order = np.arange(n, dtype=np.int32)  # bus_ids already topological
        depth = np.zeros(n, dtype=np.int32)
        for k in range(1, n):
            depth[k] = depth[parent[k]] + 1
        max_depth = int(depth.max()) if n else 0
        level_idx = np.argsort(depth, kind="stable").astype(np.int32)
        counts = np.bincount(depth, minlength=max_depth + 1)
        level_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        model.circuits[phase] = PhaseCircuit(
            phase=phase,
            bus_ids=bus_ids,
            parent=parent,
            order=order,
            edge_r=np.asarray(edge_r),
            edge_x=np.asarray(edge_x),
            level_ptr=level_ptr,
            level_idx=level_idx,
        )

    # Canonical node table.
    load_map = {(b, p): (cls, peak) for b, p, cls, peak in loads}
    for phase in PHASES:
        circ = model.circuits.get(phase)
        if circ is None:
            continue
        for bus_id in circ.bus_ids:
            key = (bus_id, phase)
            if key in load_map:
                cls, peak = load_map.pop(key)
                node = Node(bus_id, phase, "consumer", cls, peak)
            else:
                node = Node(bus_id, phase)
            model.node_index[node.id] = len(model.node_ids)
            model.node_ids.append(node.id)
            model.nodes[node.id] = node
    if load_map:
        raise NetworkError(f"loads reference unreachable nodes: {sorted(load_map)}")

    for tr in model.transformers:
        for nid in (tr.input_node, tr.output_node):
            if nid not in model.node_index:
                raise NetworkError(f"transformer {tr.id}: node {nid} does not exist")


def serialize_network(model: NetworkModel) -> bytes:
    """Serialize a model back to the feeder file format (round-trip stable)."""
    units: dict[str, dict] = {}
    for tr in model.transformers:
        entry = units.setdefault(
            tr.unit,
            {
                "id": tr.unit,
                "from": tr.from_bus,
                "to": tr.to_bus,
                "phases": "",
                "r_ohm": tr.r_ohm,
                "x_ohm": tr.x_ohm,
            },
        )
        entry["phases"] += tr.phase
        if tr.rated_kva is not None:
            entry["rating_kva"] = tr.rated_kva
    doc = {
        "meta": {
            "version": FEEDER_FORMAT_VERSION,
            "name": model.name,
            "s_base_kva": model.s_base_kva,
            "source_voltage_pu": model.source_voltage_pu,
        },
        "buses": [
            {
                "id": b.id,
                "phases": "".join(b.phases),
                "base_voltage": b.base_voltage,
                **({"source": True} if b.is_source else {}),
            }
            for b in model.buses.values()
        ],
        "lines": [
            {
                "id": ln.id,
                "from": ln.from_bus,
                "to": ln.to_bus,
                "phases": "".join(ln.phases),
                "r_ohm": ln.r_ohm,
                "x_ohm": ln.x_ohm,
            }
            for ln in model.lines
        ],
        "transformers": list(units.values()),
        "loads": [
            {
                "node": nid,
                "class": model.nodes[nid].consumer_class,
                "peak_kw": model.nodes[nid].peak_load,
            }
            for nid in model.consumer_nodes
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False).encode("utf-8")


def derive_transformer_capacities(
    model: NetworkModel, baseline_peaks: dict[str, float]
) -> NetworkModel:
    """Fill missing transformer ratings as 1.2x their baseline peak loading.

    ``baseline_peaks`` maps transformer record ids to peak apparent power in
    kVA.  Existing ratings are left untouched.
    """
    new_records = []
    for tr in model.transformers:
        if tr.rated_kva is not None:
            new_records.append(tr)
            continue
        peak = baseline_peaks.get(tr.id)
        if peak is None:
            raise NetworkError(f"transformer {tr.id}: no rating and no baseline peak")
        if peak <= 0:
            raise NetworkError(f"transformer {tr.id}: degenerate baseline peak {peak}")
        new_records.append(replace(tr, rated_kva=1.2 * peak))
    out = NetworkModel(
        name=model.name,
        buses=model.buses,
        lines=model.lines,
        transformers=new_records,
        source_bus=model.source_bus,
        source_voltage_pu=model.source_voltage_pu,
        s_base_kva=model.s_base_kva,
        nodes=model.nodes,
        circuits=model.circuits,
        node_ids=model.node_ids,
        node_index=model.node_index,
    )
    return out

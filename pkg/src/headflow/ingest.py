"""File ingestion: a pragmatic EPANET INP subset and the CSV schemas.

Supported INP content: [JUNCTIONS] (id, elevation), [RESERVOIRS]
(id, head) which become fixed-head inlets, and [PIPES] (id, node1, node2,
length m, diameter mm, roughness). Tanks, valves, pumps and any other
section are skipped and counted, never silently dropped. Demand columns
are ignored; demands come from scenario files or measurement CSVs.

Sensor CSV header: kind,id with kind in {pressure, amr, flow}.
Measurement CSV header: id,value,unit with heads in m and demands/flows
in l/s (converted to m^3/s) or m3/s.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .hydraulics import SensorReadings
from .network import Edge, NetworkGraph, Node, SensorLayout


class InpParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class MeasurementFileError(ValueError):
    pass


MANDATORY_SECTIONS = ("JUNCTIONS", "RESERVOIRS", "PIPES")
LINK_SECTIONS_SKIPPED = ("PUMPS", "VALVES")


@dataclass
class ParseResult:
    graph: NetworkGraph
    skipped: dict = field(default_factory=dict)   # category -> count
    warnings: list = field(default_factory=list)

    @property
    def n_junctions(self) -> int:
        return sum(1 for n in self.graph.nodes if n.kind == "junction")

    @property
    def n_inlets(self) -> int:
        return sum(1 for n in self.graph.nodes if n.kind == "inlet")


def _tokenize(text: str):
    """Yield (line_number, section, tokens) for data lines."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise InpParseError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip().upper()
            continue
        yield lineno, section, line.split()


def parse_inp(text: str) -> ParseResult:
    """Parse INP text into a validated NetworkGraph plus a skip report."""
    nodes: list[Node] = []
    node_lines: dict[str, int] = {}
    pipe_rows: list[tuple[int, list[str]]] = []
    skipped_nodes: set[str] = set()
    skipped: dict[str, int] = {}
    warnings: list[str] = []
    seen_sections: set[str] = set()

    def add_node(nid: str, lineno: int, **kwargs):
        if nid in node_lines:
            raise InpParseError(f"duplicate node id {nid!r}", lineno)
        node_lines[nid] = lineno
        nodes.append(Node(id=nid, **kwargs))

    def number(tok: str, what: str, lineno: int) -> float:
        try:
            return float(tok)
        except ValueError:
            raise InpParseError(f"unparseable {what} {tok!r}", lineno) from None

    for lineno, section, toks in _tokenize(text):
        if section is None:
            raise InpParseError("data before any section header", lineno)
        seen_sections.add(section)
        if section == "TITLE":
            continue
        if section == "JUNCTIONS":
            if len(toks) < 2:
                raise InpParseError("junction row needs id and elevation", lineno)
            add_node(toks[0], lineno, elevation=number(toks[1], "elevation", lineno))
        elif section == "RESERVOIRS":
            if len(toks) < 2:
                raise InpParseError("reservoir row needs id and head", lineno)
            add_node(
                toks[0],
                lineno,
                elevation=number(toks[1], "head", lineno),
                kind="inlet",
            )
        elif section == "TANKS":
            if toks:
                skipped["tanks"] = skipped.get("tanks", 0) + 1
                skipped_nodes.add(toks[0])
        elif section == "PIPES":
            pipe_rows.append((lineno, toks))
        elif section in LINK_SECTIONS_SKIPPED:
            skipped[section.lower()] = skipped.get(section.lower(), 0) + 1
        elif section in ("COORDINATES", "END", "OPTIONS", "TIMES", "REPORT",
                         "PATTERNS", "CURVES", "DEMANDS", "STATUS", "TAGS",
                         "VERTICES", "LABELS", "BACKDROP", "EMITTERS",
                         "QUALITY", "SOURCES", "REACTIONS", "MIXING",
                         "ENERGY", "CONTROLS", "RULES"):
            pass  # topology-irrelevant, tolerated silently row-wise
        else:
            skipped[f"section:{section}"] = skipped.get(f"section:{section}", 0) + 1

    for name in MANDATORY_SECTIONS:
        if name not in seen_sections:
            raise InpParseError(f"missing mandatory section [{name}]")

    known = {n.id for n in nodes}
    edges: list[Edge] = []
    edge_lines: dict[str, int] = {}
    for lineno, toks in pipe_rows:
        if len(toks) < 6:
            raise InpParseError(
                "pipe row needs id, node1, node2, length, diameter, roughness",
                lineno,
            )
        pid, n1, n2 = toks[0], toks[1], toks[2]
        if pid in edge_lines:
            raise InpParseError(f"duplicate pipe id {pid!r}", lineno)
        edge_lines[pid] = lineno
        if n1 in skipped_nodes or n2 in skipped_nodes:
            skipped["pipes_to_skipped_nodes"] = (
                skipped.get("pipes_to_skipped_nodes", 0) + 1
            )
            continue
        for nid in (n1, n2):
            if nid not in known:
                raise InpParseError(f"pipe {pid!r} references unknown node {nid!r}", lineno)
        status = toks[7].lower() if len(toks) > 7 else "open"
        if status == "closed":
            skipped["closed_pipes"] = skipped.get("closed_pipes", 0) + 1
            continue
        edges.append(
            Edge(
                id=pid,
                source=n1,
                sink=n2,
                length=number(toks[3], "length", lineno),
                roughness=number(toks[5], "roughness", lineno),
                diameter=number(toks[4], "diameter", lineno) / 1000.0,  # mm -> m
            )
        )

    if skipped:
        warnings.append(
            "skipped: " + ", ".join(f"{k}={v}" for k, v in sorted(skipped.items()))
        )
    graph = NetworkGraph(nodes, edges)
    return ParseResult(graph=graph, skipped=skipped, warnings=warnings)


def load_inp(path) -> ParseResult:
    with open(path, encoding="utf-8") as fh:
        return parse_inp(fh.read())


def serialize_inp(graph: NetworkGraph, title: str = "headflow network") -> str:
    """Write the supported INP subset; parse_inp(serialize_inp(g)) round-trips."""
    out = io.StringIO()
    out.write(f"[TITLE]\n{title}\n\n[JUNCTIONS]\n;id elevation\n")
    for n in graph.nodes:
        if n.kind == "junction":
            out.write(f" {n.id} {n.elevation!r}\n")
    out.write("\n[RESERVOIRS]\n;id head\n")
    for n in graph.nodes:
        if n.kind == "inlet":
            out.write(f" {n.id} {n.elevation!r}\n")
    out.write("\n[PIPES]\n;id node1 node2 length_m diameter_mm roughness\n")
    for e in graph.edges:
        out.write(
            f" {e.id} {e.source} {e.sink} {e.length!r} "
            f"{e.diameter * 1000.0!r} {e.roughness!r}\n"
        )
    out.write("\n[END]\n")
    return out.getvalue()


def apply_inlet_surgery(graph: NetworkGraph, inlet_head: float) -> NetworkGraph:
    """Remove fixed-head nodes and promote their neighbours to inlets.

    Mirrors the boundary simplification used for benchmarks whose source
    reservoirs sit far above the distribution area: each inlet node and
    its incident pipes are dropped, and every junction that touched one
    becomes an inlet at `inlet_head`.
    """
    old_inlets = {n.id for n in graph.nodes if n.kind == "inlet"}
    promote: set[str] = set()
    for e in graph.edges:
        if e.source in old_inlets and e.sink not in old_inlets:
            promote.add(e.sink)
        if e.sink in old_inlets and e.source not in old_inlets:
            promote.add(e.source)
    nodes = []
    for n in graph.nodes:
        if n.id in old_inlets:
            continue
        if n.id in promote:
            nodes.append(Node(id=n.id, elevation=inlet_head, kind="inlet"))
        else:
            nodes.append(n)
    edges = [
        e
        for e in graph.edges
        if e.source not in old_inlets and e.sink not in old_inlets
    ]
    return NetworkGraph(nodes, edges)


def load_sensor_config(path, graph: NetworkGraph) -> SensorLayout:
    """Read a kind,id CSV into a SensorLayout validated against the graph."""
    pressure: list[str] = []
    amr: list[str] = []
    flow: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"kind", "id"}:
            raise MeasurementFileError("sensor CSV needs header kind,id")
        for row in reader:
            kind, sid = row["kind"].strip(), row["id"].strip()
            target = {"pressure": pressure, "amr": amr, "flow": flow}.get(kind)
            if target is None:
                raise MeasurementFileError(f"unknown sensor kind {kind!r}")
            if sid in target:
                raise MeasurementFileError(f"duplicate sensor row: {kind},{sid}")
            target.append(sid)
    layout = SensorLayout(
        pressure_nodes=tuple(pressure),
        amr_nodes=tuple(amr),
        flow_edges=tuple(flow),
    )
    layout.validate(graph)
    return layout


_HEAD_UNITS = {"m"}
_FLOW_UNITS = {"l/s": 1e-3, "m3/s": 1.0}


def load_measurements(path, layout: SensorLayout) -> SensorReadings:
    """Read an id,value,unit CSV into measurement vectors in layout order.

    Heads are in m. Volumetric rows resolve to a demand when the id is an
    AMR node and to a flow when it is a metered edge; an id present in
    both namespaces is rejected as ambiguous.
    """
    heads: dict[str, float] = {}
    demands: dict[str, float] = {}
    flows: dict[str, float] = {}
    amr = set(layout.amr_nodes)
    fl = set(layout.flow_edges)
    pr = set(layout.pressure_nodes)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"id", "value", "unit"}:
            raise MeasurementFileError("measurement CSV needs header id,value,unit")
        for row in reader:
            sid = row["id"].strip()
            unit = row["unit"].strip().lower()
            try:
                value = float(row["value"])
            except ValueError:
                raise MeasurementFileError(
                    f"unparseable value {row['value']!r} for sensor {sid!r}"
                ) from None
            if unit in _HEAD_UNITS:
                if sid not in pr:
                    raise MeasurementFileError(f"unknown pressure sensor {sid!r}")
                if sid in heads:
                    raise MeasurementFileError(f"duplicate reading for {sid!r}")
                heads[sid] = value
            elif unit in _FLOW_UNITS:
                si = value * _FLOW_UNITS[unit]
                if sid in amr and sid in fl:
                    raise MeasurementFileError(
                        f"ambiguous id {sid!r}: both an AMR node and a flow edge"
                    )
                if sid in amr:
                    if sid in demands:
                        raise MeasurementFileError(f"duplicate reading for {sid!r}")
                    demands[sid] = si
                elif sid in fl:
                    if sid in flows:
                        raise MeasurementFileError(f"duplicate reading for {sid!r}")
                    flows[sid] = si
                else:
                    raise MeasurementFileError(f"unknown flow/demand sensor {sid!r}")
            else:
                raise MeasurementFileError(f"unknown unit {row['unit']!r}")

    for nid in layout.pressure_nodes:
        if nid not in heads:
            raise MeasurementFileError(f"missing reading for pressure sensor {nid!r}")
    for nid in layout.amr_nodes:
        if nid not in demands:
            raise MeasurementFileError(f"missing reading for AMR {nid!r}")
    for eid in layout.flow_edges:
        if eid not in flows:
            raise MeasurementFileError(f"missing reading for flow meter {eid!r}")

    return SensorReadings(
        h_s=np.array([heads[n] for n in layout.pressure_nodes]),
        c_a=np.array([demands[n] for n in layout.amr_nodes]),
        q_s=np.array([flows[e] for e in layout.flow_edges]),
    )

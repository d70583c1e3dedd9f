"""Water network graph model and the structural matrices built from it.

The graph is simple, directed and connected: nodes are junctions or
fixed-head inlets, edges are pipes carrying length (m), a Hazen-Williams
roughness coefficient and a diameter (m). Node and edge order is the
insertion order of the input and fixes the indexing of every matrix
produced here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

HW_EXPONENT = 1.852
RESISTANCE_PREFACTOR = 10.67  # SI Hazen-Williams constant


class InvalidNetworkError(ValueError):
    """The node/edge lists violate a graph invariant."""


class UnknownIdError(ValueError):
    """A referenced node or edge id does not exist in the graph."""

    def __init__(self, kind: str, offending_id: str):
        self.kind = kind
        self.offending_id = offending_id
        super().__init__(f"unknown {kind} id: {offending_id!r}")


@dataclass(frozen=True)
class Node:
    id: str
    elevation: float = 0.0  # junctions: ground elevation; inlets: fixed head (m)
    kind: str = "junction"  # "junction" | "inlet"


@dataclass(frozen=True)
class Edge:
    id: str
    source: str
    sink: str
    length: float      # m
    roughness: float   # Hazen-Williams coefficient, dimensionless
    diameter: float    # m


class NetworkGraph:
    """Validated pipe network with index lookups for matrix construction."""

    def __init__(self, nodes: Sequence[Node], edges: Sequence[Edge]):
        self.nodes = list(nodes)
        self.edges = list(edges)
        self._validate()
        self.node_index = {n.id: i for i, n in enumerate(self.nodes)}
        self.edge_index = {e.id: k for k, e in enumerate(self.edges)}
        self.source_idx = np.array(
            [self.node_index[e.source] for e in self.edges], dtype=int
        )
        self.sink_idx = np.array(
            [self.node_index[e.sink] for e in self.edges], dtype=int
        )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def edge_ids(self) -> list[str]:
        return [e.id for e in self.edges]

    @property
    def inlet_indices(self) -> np.ndarray:
        return np.array(
            [i for i, n in enumerate(self.nodes) if n.kind == "inlet"], dtype=int
        )

    @property
    def junction_indices(self) -> np.ndarray:
        return np.array(
            [i for i, n in enumerate(self.nodes) if n.kind == "junction"], dtype=int
        )

    def _validate(self) -> None:
        if not self.nodes:
            raise InvalidNetworkError("graph has no nodes")
        if not self.edges:
            raise InvalidNetworkError("graph has no edges")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise InvalidNetworkError(f"duplicate node ids: {dup}")
        eids = [e.id for e in self.edges]
        if len(set(eids)) != len(eids):
            dup = sorted({i for i in eids if eids.count(i) > 1})
            raise InvalidNetworkError(f"duplicate edge ids: {dup}")
        known = set(ids)
        seen_pairs: set[frozenset[str]] = set()
        for e in self.edges:
            for endpoint in (e.source, e.sink):
                if endpoint not in known:
                    raise UnknownIdError("node", endpoint)
            if e.source == e.sink:
                raise InvalidNetworkError(f"self-loop on edge {e.id!r}")
            pair = frozenset((e.source, e.sink))
            if pair in seen_pairs:
                raise InvalidNetworkError(
                    f"parallel edge {e.id!r} between {e.source!r} and {e.sink!r}"
                )
            seen_pairs.add(pair)
            if e.length <= 0 or e.roughness <= 0 or e.diameter <= 0:
                raise InvalidNetworkError(
                    f"edge {e.id!r} needs positive length, roughness and diameter"
                )
        kinds = {n.kind for n in self.nodes}
        if not kinds <= {"junction", "inlet"}:
            raise InvalidNetworkError(f"unknown node kind in {sorted(kinds)}")
        if not any(n.kind == "inlet" for n in self.nodes):
            raise InvalidNetworkError("graph needs at least one inlet node")
        if not self._connected():
            raise InvalidNetworkError("graph is not connected")

    def _connected(self) -> bool:
        n = len(self.nodes)
        idx = {node.id: i for i, node in enumerate(self.nodes)}
        adj: list[list[int]] = [[] for _ in range(n)]
        for e in self.edges:
            i, j = idx[e.source], idx[e.sink]
            adj[i].append(j)
            adj[j].append(i)
        seen = [False] * n
        stack = [0]
        seen[0] = True
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        return all(seen)


@dataclass(frozen=True)
class SensorLayout:
    """Where the pressure sensors, demand meters (AMRs) and flow meters sit."""

    pressure_nodes: tuple[str, ...]
    amr_nodes: tuple[str, ...] = ()
    flow_edges: tuple[str, ...] = ()

    def __post_init__(self):
        for name, items in (
            ("pressure_nodes", self.pressure_nodes),
            ("amr_nodes", self.amr_nodes),
            ("flow_edges", self.flow_edges),
        ):
            if len(set(items)) != len(items):
                raise InvalidNetworkError(f"duplicate entries in {name}: {items}")
        if len(self.pressure_nodes) < 1:
            raise InvalidNetworkError("layout needs at least one pressure sensor")

    def validate(self, graph: NetworkGraph) -> None:
        for nid in self.pressure_nodes + self.amr_nodes:
            if nid not in graph.node_index:
                raise UnknownIdError("node", nid)
        for eid in self.flow_edges:
            if eid not in graph.edge_index:
                raise UnknownIdError("edge", eid)


def build_incidence(graph: NetworkGraph) -> np.ndarray:
    """Edge-node incidence: row k is +1 at the source of edge k, -1 at the sink."""
    M = np.zeros((graph.n_edges, graph.n_nodes))
    M[np.arange(graph.n_edges), graph.source_idx] = 1.0
    M[np.arange(graph.n_edges), graph.sink_idx] = -1.0
    return M


def resistance_vector(graph: NetworkGraph) -> np.ndarray:
    """Per-pipe Hazen-Williams resistance 10.67 * length / (C^1.852 * d^4.87)."""
    rho = np.array([e.length for e in graph.edges])
    mu = np.array([e.roughness for e in graph.edges])
    delta = np.array([e.diameter for e in graph.edges])
    if np.any(rho <= 0) or np.any(mu <= 0) or np.any(delta <= 0):
        raise InvalidNetworkError("pipe attributes must be strictly positive")
    return RESISTANCE_PREFACTOR * rho / (mu**HW_EXPONENT * delta**4.87)


def resistance_matrix(graph: NetworkGraph) -> np.ndarray:
    return np.diag(resistance_vector(graph))


def structural_weights(
    graph: NetworkGraph, scheme: str = "unit"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjacency W, degree D and Laplacian L = D - W for the undirected skeleton.

    Only the "unit" scheme (w_ij = 1 for adjacent nodes) is defined; edge
    weights are later replaced by the physics-derived ones anyway.
    """
    if scheme != "unit":
        raise ValueError(f"unknown weight scheme: {scheme!r}")
    n = graph.n_nodes
    W = np.zeros((n, n))
    W[graph.source_idx, graph.sink_idx] = 1.0
    W[graph.sink_idx, graph.source_idx] = 1.0
    D = np.diag(W.sum(axis=1))
    return W, D, D - W


def pressure_incidence(graph: NetworkGraph, h: np.ndarray) -> np.ndarray:
    """Head-oriented incidence: +1 at the higher-head endpoint, -1 at the lower.

    Ties keep the declared edge orientation, which leaves B @ h untouched
    (the entry is zero either way). Every entry of B @ h is >= 0.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (graph.n_nodes,):
        raise ValueError(f"expected {graph.n_nodes} heads, got shape {h.shape}")
    B = build_incidence(graph)
    flip = h[graph.source_idx] < h[graph.sink_idx]
    B[flip] *= -1.0
    return B


def sensor_matrices(
    layout: SensorLayout, graph: NetworkGraph
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Selector matrices S (heads) and S_q (flows), plus AMR column indices.

    S @ h lists the sensed heads in layout order, S_q @ q the sensed flows.
    The returned index array picks the AMR columns out of any incidence-like
    matrix, e.g. B[:, amr_idx].
    """
    layout.validate(graph)
    S = np.zeros((len(layout.pressure_nodes), graph.n_nodes))
    for r, nid in enumerate(layout.pressure_nodes):
        S[r, graph.node_index[nid]] = 1.0
    S_q = np.zeros((len(layout.flow_edges), graph.n_edges))
    for r, eid in enumerate(layout.flow_edges):
        S_q[r, graph.edge_index[eid]] = 1.0
    amr_idx = np.array([graph.node_index[nid] for nid in layout.amr_nodes], dtype=int)
    return S, S_q, amr_idx


@dataclass
class StructuralMatrices:
    """Every structural matrix the estimators consume, built in one pass."""

    M: np.ndarray       # incidence, n_E x n_V
    W: np.ndarray       # weighted adjacency, n_V x n_V
    D: np.ndarray       # degree, n_V x n_V
    L: np.ndarray       # Laplacian D - W
    T: np.ndarray       # diagonal resistance, n_E x n_E
    S: np.ndarray       # pressure sensorization, n_s x n_V
    S_q: np.ndarray     # flow sensorization, n_q x n_E
    amr_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    @classmethod
    def build(cls, graph: NetworkGraph, layout: SensorLayout) -> "StructuralMatrices":
        W, D, L = structural_weights(graph)
        S, S_q, amr_idx = sensor_matrices(layout, graph)
        return cls(
            M=build_incidence(graph),
            W=W,
            D=D,
            L=L,
            T=resistance_matrix(graph),
            S=S,
            S_q=S_q,
            amr_idx=amr_idx,
        )

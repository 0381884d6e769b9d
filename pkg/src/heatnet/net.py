"""Directed-graph model of a district heating network.

A network is a directed multigraph whose edges are pipes (feeding, return,
bypass) or user branches (heat-exchanger + valve), rooted at a plant supply
node and closed at a plant return node. This module owns the incidence
matrix, the temperature state-matrix assembly and the partitioning used by
the distributed controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "EdgeKind",
    "PipeParams",
    "UserParams",
    "FluidProps",
    "Edge",
    "NetworkGraph",
    "NetworkError",
    "PartitionError",
    "CutKind",
    "Partition",
    "build_incidence",
    "assemble_thermal_matrices",
    "make_partitions",
]

MIX_EPS = 1e-9  # regularizes flow-weighted mixing at vanishing throughput


class NetworkError(ValueError):
    """Raised when a network description violates a structural invariant."""


class PartitionError(ValueError):
    """Raised when an edge-to-subsystem assignment produces an illegal cut."""


class EdgeKind(Enum):
    FEEDING = "feeding"
    RETURN = "return"
    USER = "user"
    BYPASS = "bypass"

    @property
    def is_user(self) -> bool:
        return self is EdgeKind.USER


@dataclass(frozen=True)
class PipeParams:
    """Physical parameters of a non-user pipe.

    zeta    friction coefficient [Pa s^2/kg^2]
    volume  water volume [m^3]
    hAs     heat transfer coefficient to the ground [W/K]
    """

    zeta: float
    volume: float
    hAs: float

    def __post_init__(self):
        if self.zeta < 0:
            raise NetworkError(f"pipe zeta must be >= 0, got {self.zeta}")
        if self.volume <= 0:
            raise NetworkError(f"pipe volume must be > 0, got {self.volume}")
        if self.hAs < 0:
            raise NetworkError(f"pipe hAs must be >= 0, got {self.hAs}")


@dataclass(frozen=True)
class UserParams:
    """Valve parameters of a user branch: zeta_u(theta) = mu*(1/theta - 1)^2."""

    mu: float
    theta_min: float = 0.01

    def __post_init__(self):
        if self.mu <= 0:
            raise NetworkError(f"valve mu must be > 0, got {self.mu}")
        if not 0.0 < self.theta_min < 1.0:
            raise NetworkError(f"theta_min must lie in (0, 1), got {self.theta_min}")


@dataclass(frozen=True)
class FluidProps:
    """Operating fluid: density [kg/m^3] and specific heat [J/(kg K)]."""

    rho: float = 1000.0
    cp: float = 4186.0

    def __post_init__(self):
        if self.rho <= 0 or self.cp <= 0:
            raise NetworkError("fluid rho and cp must be positive")


@dataclass(frozen=True)
class Edge:
    name: str
    tail: str
    head: str
    kind: EdgeKind
    params: PipeParams | UserParams

    def __post_init__(self):
        if self.tail == self.head:
            raise NetworkError(f"edge {self.name!r} is a self-loop at {self.tail!r}")
        if self.kind.is_user and not isinstance(self.params, UserParams):
            raise NetworkError(f"user edge {self.name!r} needs UserParams")
        if not self.kind.is_user and not isinstance(self.params, PipeParams):
            raise NetworkError(f"non-user edge {self.name!r} needs PipeParams")


class NetworkGraph:
    """Validated network with index maps and the incidence matrix.

    The sign convention is Lambda[tail, e] = +1, Lambda[head, e] = -1, so
    that mass balance reads ``Lambda @ m_edges = m_nodes`` with a positive
    injection at the plant root, and edge pressure drops along the flow
    direction are ``Lambda.T @ P``.
    """

    def __init__(self, edges: list[Edge], plant_root: str, plant_terminal: str):
        if not edges:
            raise NetworkError("network has no edges")
        names = [e.name for e in edges]
        if len(set(names)) != len(names):
            raise NetworkError("duplicate edge names")
        self.edges = list(edges)
        self.plant_root = plant_root
        self.plant_terminal = plant_terminal

        nodes: list[str] = []
        seen = set()
        for e in edges:
            for v in (e.tail, e.head):
                if v not in seen:
                    seen.add(v)
                    nodes.append(v)
        self.nodes = nodes
        self.node_index = {v: i for i, v in enumerate(nodes)}
        self.edge_index = {e.name: j for j, e in enumerate(edges)}

        self.tails = np.array([self.node_index[e.tail] for e in edges], dtype=np.intp)
        self.heads = np.array([self.node_index[e.head] for e in edges], dtype=np.intp)
        self.user_edges = [j for j, e in enumerate(edges) if e.kind.is_user]
        self.nonuser_edges = [j for j, e in enumerate(edges) if not e.kind.is_user]
        self.bypass_edges = [j for j, e in enumerate(edges) if e.kind is EdgeKind.BYPASS]

        self.out_edges: dict[int, list[int]] = {i: [] for i in range(len(nodes))}
        self.in_edges: dict[int, list[int]] = {i: [] for i in range(len(nodes))}
        for j in range(len(edges)):
            self.out_edges[int(self.tails[j])].append(j)
            self.in_edges[int(self.heads[j])].append(j)

        self._validate()
        self.incidence = build_incidence(self)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def kind_nodes(self, kind: EdgeKind) -> set[int]:
        """Node indices touching an edge of the given kind."""
        out = set()
        for j, e in enumerate(self.edges):
            if e.kind is kind:
                out.add(int(self.tails[j]))
                out.add(int(self.heads[j]))
        return out

    def _validate(self):
        problems = []
        if self.plant_root not in self.node_index:
            problems.append(f"plant root {self.plant_root!r} not in graph")
        if self.plant_terminal not in self.node_index:
            problems.append(f"plant terminal {self.plant_terminal!r} not in graph")
        if problems:
            raise NetworkError("; ".join(problems))

        v0p = self.node_index[self.plant_root]
        v0m = self.node_index[self.plant_terminal]
        if self.in_edges[v0p]:
            problems.append(f"plant root {self.plant_root!r} has in-edges")
        if self.out_edges[v0m]:
            problems.append(f"plant terminal {self.plant_terminal!r} has out-edges")

        feed_nodes = self.kind_nodes(EdgeKind.FEEDING)
        ret_nodes = self.kind_nodes(EdgeKind.RETURN)
        for v in sorted(feed_nodes - {v0p, v0m}):
            if len(self.in_edges[v]) != 1:
                problems.append(
                    f"feeding node {self.nodes[v]!r} has indegree "
                    f"{len(self.in_edges[v])}, expected 1"
                )
        for v in sorted(ret_nodes - {v0p, v0m}):
            if len(self.out_edges[v]) != 1:
                problems.append(
                    f"return node {self.nodes[v]!r} has outdegree "
                    f"{len(self.out_edges[v])}, expected 1"
                )

        # weak connectivity
        adj: dict[int, set[int]] = {i: set() for i in range(self.n_nodes)}
        for j in range(self.n_edges):
            adj[self.tails[j]].add(int(self.heads[j]))
            adj[self.heads[j]].add(int(self.tails[j]))
        stack, seen = [0], {0}
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        if len(seen) != self.n_nodes:
            missing = [self.nodes[i] for i in range(self.n_nodes) if i not in seen]
            problems.append(f"graph is disconnected; unreachable nodes: {missing}")

        # every user edge on a directed plant-root -> plant-terminal path
        reach_fwd = self._reach(v0p, self.out_edges, self.heads)
        reach_bwd = self._reach(v0m, self.in_edges, self.tails)
        for j in self.user_edges:
            if self.tails[j] not in reach_fwd or self.heads[j] not in reach_bwd:
                problems.append(
                    f"user edge {self.edges[j].name!r} is not on a directed "
                    f"{self.plant_root!r}->{self.plant_terminal!r} path"
                )

        if problems:
            raise NetworkError("; ".join(problems))

    def _reach(self, start: int, edges_of, endpoint) -> set[int]:
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for j in edges_of[v]:
                w = int(endpoint[j])
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return seen

    def downstream_users(self, from_edges: list[int]) -> set[int]:
        """User-edge indices reachable along directed paths from the given edges."""
        found: set[int] = set()
        seen_nodes: set[int] = set()
        stack = [int(self.heads[j]) for j in from_edges]
        for j in from_edges:
            if self.edges[j].kind.is_user:
                found.add(j)
        while stack:
            v = stack.pop()
            if v in seen_nodes:
                continue
            seen_nodes.add(v)
            for j in self.out_edges[v]:
                if self.edges[j].kind.is_user:
                    found.add(j)
                stack.append(int(self.heads[j]))
        return found


def build_incidence(graph: NetworkGraph) -> np.ndarray:
    """Node-by-edge incidence matrix: +1 at the tail, -1 at the head."""
    lam = np.zeros((graph.n_nodes, graph.n_edges))
    for j in range(graph.n_edges):
        lam[graph.tails[j], j] = 1.0
        lam[graph.heads[j], j] = -1.0
    return lam


def assemble_thermal_matrices(
    graph: NetworkGraph,
    flows: np.ndarray,
    fluid: FluidProps,
) -> tuple[np.ndarray, np.ndarray]:
    """State matrices (A, B) of the non-user pipe temperature dynamics.

    Row e of ``A @ T + B @ [T0, TsetR, Tamb]`` equals
    ``c1*m_e*Tin_e + c2*Tamb - (c1*m_e + c2)*T_e`` where ``Tin_e`` is the
    flow-weighted mix of the upstream edge outlet temperatures at the tail
    node of e (user edges contribute the constant return set temperature,
    the plant root contributes T0).

    Parameters
    ----------
    flows : per-edge mass flow [kg/s], nonnegative in edge direction.
    fluid : operating fluid properties.

    Returns
    -------
    A : (n_nonuser, n_nonuser)
    B : (n_nonuser, 3) with columns scaling [T0, TsetR, Tamb].
    """
    flows = np.asarray(flows, dtype=float)
    if flows.shape != (graph.n_edges,):
        raise ValueError(f"flows must have shape ({graph.n_edges},)")
    if np.any(flows < -1e-12):
        raise ValueError("negative edge flow passed to thermal assembly")

    nonuser = graph.nonuser_edges
    pos = {j: r for r, j in enumerate(nonuser)}
    n = len(nonuser)
    A = np.zeros((n, n))
    B = np.zeros((n, 3))
    v0p = graph.node_index[graph.plant_root]

    for r, j in enumerate(nonuser):
        e = graph.edges[j]
        c1 = 1.0 / (fluid.rho * e.params.volume)
        c2 = e.params.hAs / (fluid.rho * fluid.cp * e.params.volume)
        A[r, r] -= c1 * flows[j] + c2
        B[r, 2] += c2

        tail = int(graph.tails[j])
        if tail == v0p:
            B[r, 0] += c1 * flows[j]
            continue
        inflows = graph.in_edges[tail]
        m_tot = sum(flows[i] for i in inflows) + MIX_EPS
        for i in inflows:
            w = c1 * flows[j] * flows[i] / m_tot
            if graph.edges[i].kind.is_user:
                B[r, 1] += w
            else:
                A[r, pos[i]] += w
    return A, B


class CutKind(Enum):
    FEEDING = "feeding"  # cut downstream of a feeding node
    RETURN = "return"  # cut upstream of a return node
    PLANT_ROOT = "plant_root"
    PLANT_TERMINAL = "plant_terminal"


@dataclass
class Partition:
    """A subsystem: an edge-contiguous subgraph with boundary bookkeeping.

    Roots are nodes where flow enters the subsystem, terminals where it
    leaves. Every non-plant root/terminal is a cut node matched with the
    partitions owning the other side; ``producers``/``consumers`` record,
    per cut node, which partition determines each passed quantity.
    """

    pid: int
    edge_idx: list[int]
    nodes: list[int] = field(default_factory=list)
    roots: list[int] = field(default_factory=list)
    terminals: list[int] = field(default_factory=list)
    cut_kind: dict[int, CutKind] = field(default_factory=dict)
    # peer partitions on the other side of each cut node
    peers_at: dict[int, list[int]] = field(default_factory=dict)
    has_plant_root: bool = False
    has_plant_terminal: bool = False

    @property
    def feeding_roots(self) -> list[int]:
        return [v for v in self.roots if self.cut_kind.get(v) is CutKind.FEEDING]

    @property
    def return_roots(self) -> list[int]:
        return [v for v in self.roots if self.cut_kind.get(v) is CutKind.RETURN]

    @property
    def feeding_terminals(self) -> list[int]:
        return [v for v in self.terminals if self.cut_kind.get(v) is CutKind.FEEDING]

    @property
    def return_terminals(self) -> list[int]:
        return [v for v in self.terminals if self.cut_kind.get(v) is CutKind.RETURN]


def make_partitions(
    graph: NetworkGraph, edge_assignment: dict[str, int]
) -> list[Partition]:
    """Group edges into subsystems and validate every induced cut.

    ``edge_assignment`` maps edge name -> partition id. The ids must cover
    every edge exactly once; each partition must be edge-contiguous; a node
    whose edges straddle partitions must be the plant root/terminal, a
    feeding node (cut downstream of it) or a return node (cut upstream of
    it).
    """
    missing = [e.name for e in graph.edges if e.name not in edge_assignment]
    if missing:
        raise PartitionError(f"assignment misses edges: {missing}")
    unknown = [n for n in edge_assignment if n not in graph.edge_index]
    if unknown:
        raise PartitionError(f"assignment names unknown edges: {unknown}")

    pids = sorted(set(edge_assignment.values()))
    by_pid: dict[int, list[int]] = {pid: [] for pid in pids}
    for name, pid in edge_assignment.items():
        by_pid[pid].append(graph.edge_index[name])
    owner = np.empty(graph.n_edges, dtype=np.intp)
    for pid, idxs in by_pid.items():
        for j in idxs:
            owner[j] = pid

    v0p = graph.node_index[graph.plant_root]
    v0m = graph.node_index[graph.plant_terminal]
    feed_nodes = graph.kind_nodes(EdgeKind.FEEDING)
    ret_nodes = graph.kind_nodes(EdgeKind.RETURN)

    parts: list[Partition] = []
    for pid in pids:
        idxs = sorted(by_pid[pid])
        part = Partition(pid=pid, edge_idx=idxs)
        node_set: set[int] = set()
        for j in idxs:
            node_set.add(int(graph.tails[j]))
            node_set.add(int(graph.heads[j]))
        part.nodes = sorted(node_set)

        # edge contiguity within the partition
        if len(idxs) > 1:
            adj: dict[int, set[int]] = {v: set() for v in node_set}
            for j in idxs:
                adj[int(graph.tails[j])].add(int(graph.heads[j]))
                adj[int(graph.heads[j])].add(int(graph.tails[j]))
            start = int(graph.tails[idxs[0]])
            seen = {start}
            stack = [start]
            while stack:
                v = stack.pop()
                for w in adj[v]:
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
            if seen != node_set:
                raise PartitionError(f"partition {pid} is not edge-contiguous")

        for v in part.nodes:
            local_in = [j for j in graph.in_edges[v] if owner[j] == pid]
            local_out = [j for j in graph.out_edges[v] if owner[j] == pid]
            foreign_in = [j for j in graph.in_edges[v] if owner[j] != pid]
            foreign_out = [j for j in graph.out_edges[v] if owner[j] != pid]

            if v == v0p:
                if local_out:
                    part.roots.append(v)
                    part.cut_kind[v] = CutKind.PLANT_ROOT
                    part.has_plant_root = True
                continue
            if v == v0m:
                if local_in:
                    part.terminals.append(v)
                    part.cut_kind[v] = CutKind.PLANT_TERMINAL
                    part.has_plant_terminal = True
                continue
            if not foreign_in and not foreign_out:
                continue  # interior node

            # v is a cut node: classify and validate
            is_feed_cut = v in feed_nodes and len(graph.in_edges[v]) == 1 and (
                graph.edges[graph.in_edges[v][0]].kind is EdgeKind.FEEDING
            )
            is_ret_cut = v in ret_nodes and len(graph.out_edges[v]) == 1 and (
                graph.edges[graph.out_edges[v][0]].kind is EdgeKind.RETURN
            )
            if is_feed_cut and is_ret_cut:
                raise PartitionError(
                    f"cut node {graph.nodes[v]!r} is ambiguous (feeding in-edge "
                    f"and return out-edge)"
                )
            if is_feed_cut:
                # upstream side owns the single in-edge
                if local_in and foreign_out and not foreign_in:
                    part.terminals.append(v)
                    part.cut_kind[v] = CutKind.FEEDING
                    part.peers_at[v] = sorted({int(owner[j]) for j in foreign_out})
                elif local_out and foreign_in:
                    part.roots.append(v)
                    part.cut_kind[v] = CutKind.FEEDING
                    part.peers_at[v] = sorted({int(owner[j]) for j in foreign_in})
                else:
                    raise PartitionError(
                        f"illegal cut at feeding node {graph.nodes[v]!r} "
                        f"(partition {pid})"
                    )
            elif is_ret_cut:
                if local_out and foreign_in and not foreign_out:
                    part.roots.append(v)
                    part.cut_kind[v] = CutKind.RETURN
                    part.peers_at[v] = sorted({int(owner[j]) for j in foreign_in})
                elif local_in and foreign_out:
                    part.terminals.append(v)
                    part.cut_kind[v] = CutKind.RETURN
                    part.peers_at[v] = sorted({int(owner[j]) for j in foreign_out})
                else:
                    raise PartitionError(
                        f"illegal cut at return node {graph.nodes[v]!r} "
                        f"(partition {pid})"
                    )
            else:
                raise PartitionError(
                    f"cut at node {graph.nodes[v]!r} violates the "
                    f"feeding-/return-node rule (indegree/outdegree condition)"
                )
        parts.append(part)

    # every non-plant root/terminal must have peers on the other side
    for part in parts:
        for v in part.roots + part.terminals:
            kind = part.cut_kind[v]
            if kind in (CutKind.PLANT_ROOT, CutKind.PLANT_TERMINAL):
                continue
            if not part.peers_at.get(v):
                raise PartitionError(
                    f"boundary node {graph.nodes[v]!r} of partition {part.pid} "
                    f"has no matching partition"
                )
    return parts

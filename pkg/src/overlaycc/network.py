"""Overlay network model: relays, circuits, queues and backlog."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

CELL_BYTES = 512
KB = 1024


def kbps_to_cells(rate_kbps: float) -> float:
    return rate_kbps * KB / CELL_BYTES


def cells_to_kbps(rate_cells: float) -> float:
    return rate_cells * CELL_BYTES / KB


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class TrafficSourceSpec:
    """What a circuit's client offers.

    ``kind`` is ``"bulk"`` (infinite), ``"web"`` (fixed-size objects separated
    by uniform pauses) or ``"scripted"`` (bulk while inside one of the
    ``active`` intervals, silent otherwise).
    """

    kind: str = "bulk"
    start: float = 0.0
    object_kb: float = 320.0
    pause: tuple[float, float] = (1.0, 2.0)
    active: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("bulk", "web", "scripted"):
            raise TopologyError(f"unknown source kind {self.kind!r}")
        lo, hi = self.pause
        if self.kind == "web" and not (1.0 <= lo <= hi <= 2.0):
            raise TopologyError("web pause bounds must satisfy 1 <= lo <= hi <= 2 s")


@dataclass(frozen=True)
class Node:
    id: int
    cap_in: float  # cells/s
    cap_out: float  # cells/s

    def __post_init__(self):
        if not (self.cap_in > 0 and self.cap_out > 0):
            raise TopologyError(f"node {self.id}: capacities must be positive")


@dataclass(frozen=True)
class Circuit:
    id: int
    path: tuple[int, ...]
    source: TrafficSourceSpec = field(default_factory=TrafficSourceSpec)

    def __post_init__(self):
        if len(self.path) < 1:
            raise TopologyError(f"circuit {self.id}: empty path")
        if len(set(self.path)) != len(self.path):
            raise TopologyError(f"circuit {self.id}: path repeats a relay")


@dataclass(frozen=True)
class OverlayNetwork:
    nodes: tuple[Node, ...]
    circuits: tuple[Circuit, ...]

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate node id")
        cids = [c.id for c in self.circuits]
        if len(set(cids)) != len(cids):
            raise TopologyError("duplicate circuit id")
        known = set(ids)
        for c in self.circuits:
            missing = [a for a in c.path if a not in known]
            if missing:
                raise TopologyError(f"circuit {c.id} uses unknown nodes {missing}")

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def p(self) -> int:
        return len(self.circuits)

    @cached_property
    def edges(self) -> frozenset[tuple[int, int]]:
        """Directed overlay links used by at least one circuit."""
        return frozenset(
            (a, b) for c in self.circuits for a, b in zip(c.path, c.path[1:])
        )

    @property
    def e(self) -> int:
        return len(self.edges)

    @cached_property
    def node_by_id(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def circuit_by_id(self) -> dict[int, Circuit]:
        return {c.id: c for c in self.circuits}

    @cached_property
    def _through(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for c in self.circuits:
            for a in c.path:
                out[a].append(c.id)
        return {k: tuple(v) for k, v in out.items()}

    def circuits_through(self, node: int) -> tuple[int, ...]:
        """Circuits whose path contains ``node``, in circuit order."""
        try:
            return self._through[node]
        except KeyError:
            raise TopologyError(f"unknown node {node}") from None

    def queue_keys(self) -> set[tuple[int, int]]:
        return {(a, c.id) for c in self.circuits for a in c.path}

    def max_capacity(self) -> float:
        return max(max(n.cap_in, n.cap_out) for n in self.nodes)

    def predecessor(self, circuit: int, node: int) -> int | None:
        path = self.circuit_by_id[circuit].path
        k = path.index(node)
        return path[k - 1] if k > 0 else None

    def successor(self, circuit: int, node: int) -> int | None:
        path = self.circuit_by_id[circuit].path
        k = path.index(node)
        return path[k + 1] if k + 1 < len(path) else None

    def with_sources(self, sources: Mapping[int, TrafficSourceSpec]) -> "OverlayNetwork":
        circuits = tuple(
            Circuit(c.id, c.path, sources.get(c.id, c.source)) for c in self.circuits
        )
        return OverlayNetwork(self.nodes, circuits)

    def scaled(self, factor: float) -> "OverlayNetwork":
        nodes = tuple(Node(n.id, n.cap_in * factor, n.cap_out * factor) for n in self.nodes)
        return OverlayNetwork(nodes, self.circuits)


def backlog(net: OverlayNetwork, queues: Mapping[tuple[int, int], float]) -> float:
    """Total queued data over every (node, circuit) pair the circuit traverses."""
    keys = net.queue_keys()
    got = set(queues)
    if got != keys:
        extra, missing = sorted(got - keys), sorted(keys - got)
        raise TopologyError(f"queue keys mismatch: extra={extra} missing={missing}")
    return float(sum(queues.values()))


# Toy scenario: two senders, one shared relay, three receivers.
TOY_SENDER_1, TOY_SENDER_2, TOY_BOTTLENECK = 0, 1, 2
TOY_RECEIVERS = (3, 4, 5)
TOY_BOTTLENECK_KBPS = 410.1
TOY_OTHER_KBPS = 1000.0
TOY_LINK_LATENCY = 0.020

# circuit 2 goes silent twice; each tuple is an active interval in seconds
TOY1_CIRCUIT2_ACTIVE = ((0.5, 10.0), (15.0, 20.0), (25.0, float("inf")))


def build_toy_topology(scenario: int = 2) -> OverlayNetwork:
    """Six relays and three circuits meeting at one bottleneck relay.

    Circuits 1 and 2 leave from the same sender; circuit 3 from the other.
    In scenario 1 circuit 2 stops and restarts twice; in scenario 2 every
    circuit is bulk.
    """
    if scenario not in (1, 2):
        raise TopologyError("toy scenario must be 1 or 2")
    other = kbps_to_cells(TOY_OTHER_KBPS)
    neck = kbps_to_cells(TOY_BOTTLENECK_KBPS)
    nodes = tuple(
        Node(i, neck, neck) if i == TOY_BOTTLENECK else Node(i, other, other)
        for i in range(6)
    )
    starts = (0.0, 0.5, 1.0)
    senders = (TOY_SENDER_1, TOY_SENDER_1, TOY_SENDER_2)
    circuits = []
    for k, (sender, recv, start) in enumerate(zip(senders, TOY_RECEIVERS, starts)):
        cid = k + 1
        if scenario == 1 and cid == 2:
            src = TrafficSourceSpec("scripted", start=start, active=TOY1_CIRCUIT2_ACTIVE)
        else:
            src = TrafficSourceSpec("bulk", start=start)
        circuits.append(Circuit(cid, (sender, TOY_BOTTLENECK, recv), src))
    return OverlayNetwork(nodes, tuple(circuits))


def network_from_lists(
    nodes: Iterable[tuple[int, float, float]], paths: Iterable[Iterable[int]]
) -> OverlayNetwork:
    """Convenience constructor: ``nodes`` as (id, cap_in, cap_out), circuits numbered from 1."""
    ns = tuple(Node(i, a, b) for i, a, b in nodes)
    cs = tuple(Circuit(k + 1, tuple(p)) for k, p in enumerate(paths))
    return OverlayNetwork(ns, cs)

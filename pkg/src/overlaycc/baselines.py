"""AIMD transport state and the two baseline schedulers.

Connections are modelled at cell granularity: slow start, additive increase,
multiplicative decrease at most once per round trip, and a retransmit queue
that is drained before fresh data.  ``vanilla_step`` multiplexes several
circuits on one connection per relay pair; ``pctcp_step`` requires one
connection per circuit.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

INITIAL_CWND = 10.0
MIN_CWND = 1.0
SENDME_WINDOW = 1000
SENDME_INCREMENT = 100


@dataclass
class AimdConnState:
    rtt: int  # sub-steps
    cwnd: float = INITIAL_CWND
    ssthresh: float = float("inf")
    in_flight: int = 0
    last_cut: int = -(10 ** 9)
    halvings: int = 0
    # lost batches waiting to be resent: [circuit, entry_substep, count]
    retx: deque = field(default_factory=deque)

    def window(self) -> int:
        """Cells that may be sent now."""
        return max(0, int(self.cwnd) - self.in_flight)

    def retx_cells(self) -> int:
        return sum(b[2] for b in self.retx)

    def on_ack(self, n: int) -> None:
        self.in_flight -= n
        for _ in range(n):
            if self.cwnd < self.ssthresh:
                self.cwnd += 1.0
            else:
                self.cwnd += 1.0 / self.cwnd

    def on_loss(self, circuit: int, entry: int, n: int, now: int) -> None:
        self.in_flight -= n
        self.retx.append([circuit, entry, n])
        if now - self.last_cut >= self.rtt:
            self.ssthresh = max(self.cwnd / 2.0, 2.0)
            self.cwnd = max(self.ssthresh, MIN_CWND)
            self.last_cut = now
            self.halvings += 1


@dataclass
class CircuitWindowState:
    """End-to-end circuit window at the client plus delivery counter at the sink."""

    package_window: int = SENDME_WINDOW
    delivered_since_sendme: int = 0
    sendmes: int = 0

    def on_send(self, n: int) -> None:
        if n > self.package_window:
            raise ValueError("circuit window overrun")
        self.package_window -= n

    def on_deliver(self, n: int) -> int:
        """Returns how many SENDME increments the sink emits."""
        self.delivered_since_sendme += n
        k = self.delivered_since_sendme // SENDME_INCREMENT
        self.delivered_since_sendme -= k * SENDME_INCREMENT
        self.sendmes += k
        return k

    def on_sendme(self, k: int) -> None:
        self.package_window += k * SENDME_INCREMENT


def rr_allocate(demands: Sequence[int], budget: int, start: int = 0) -> list[int]:
    """Round-robin integer allocation of ``budget`` cells.

    Equivalent to cycling one cell at a time over the non-exhausted entries,
    beginning at ``start``.
    """
    n = len(demands)
    alloc = [0] * n
    if n == 0 or budget <= 0:
        return alloc
    total = sum(demands)
    if total <= budget:
        return list(demands)
    remaining = budget
    active = [i for i in range(n) if demands[i] > 0]
    while remaining > 0 and active:
        share = remaining // len(active)
        if share == 0:
            order = sorted(active, key=lambda i: (i - start) % n)
            for i in order[:remaining]:
                alloc[i] += 1
            break
        nxt = []
        for i in active:
            take = min(share, demands[i] - alloc[i])
            alloc[i] += take
            remaining -= take
            if alloc[i] < demands[i]:
                nxt.append(i)
        active = nxt
    return alloc


@dataclass
class Link:
    """One outgoing connection of a relay and the circuits it carries."""

    conn: AimdConnState
    circuits: tuple[int, ...]


def _schedule(links: Sequence[Link], queues: Mapping[int, int], budget: int,
              rotation: int, limit: Mapping[int, int] | None) -> list[tuple[int, int | None, int]]:
    avail = []
    per_circuit = []
    for ln in links:
        fresh = []
        for c in ln.circuits:
            q = queues.get(c, 0)
            if limit is not None:
                q = min(q, limit.get(c, 0))
            fresh.append(max(q, 0))
        per_circuit.append(fresh)
        avail.append(min(ln.conn.window(), ln.conn.retx_cells() + sum(fresh)))
    grant = rr_allocate(avail, budget, rotation % max(len(links), 1))
    out: list[tuple[int, int | None, int]] = []
    for j, (ln, g) in enumerate(zip(links, grant)):
        if g <= 0:
            continue
        r = min(g, ln.conn.retx_cells())
        if r:
            out.append((j, None, r))
        g -= r
        if g <= 0:
            continue
        share = rr_allocate(per_circuit[j], g, rotation % max(len(ln.circuits), 1))
        for c, n in zip(ln.circuits, share):
            if n:
                out.append((j, c, n))
    return out


def vanilla_step(links: Sequence[Link], queues: Mapping[int, int], budget: int,
                 rotation: int = 0) -> list[tuple[int, int | None, int]]:
    """Decide one sub-step of sends for a relay.

    Returns ``(link_index, circuit, cells)`` triples; ``circuit is None``
    means cells taken from that connection's retransmit queue.  The relay
    budget is split round-robin over connections, and each connection's share
    round-robin over its circuits.
    """
    return _schedule(links, queues, budget, rotation, None)


def pctcp_step(links: Sequence[Link], queues: Mapping[int, int], budget: int,
               rotation: int = 0, limit: Mapping[int, int] | None = None
               ) -> list[tuple[int, int | None, int]]:
    """As :func:`vanilla_step` with one connection per circuit.

    ``limit`` optionally caps fresh cells per circuit (token-bucket gating).
    """
    for ln in links:
        if len(ln.circuits) != 1:
            raise ValueError("pctcp links carry exactly one circuit")
    return _schedule(links, queues, budget, rotation, limit)

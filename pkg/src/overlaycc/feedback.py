"""Trajectory exchange between adjacent relays.

Bundles are in-memory records handed over out of band.  Every bundle is
readable one global step after it was published.  Predecessor plans are used
as published.  Successor plans (the outgoing allowance) can be aligned three
ways:

``"shifted"``
    advanced by one sample so they line up in absolute time.  The successor's
    answer to a rate-increase request sits in its sample 0, which is dropped,
    so rates only grow through the padded tail.
``"published"``
    used as published.  Increase requests work, but nothing ever moves along
    the horizon, so stale shapes in samples 1..N persist indefinitely.
``"merged"`` (default)
    shifted, except that sample 0 is the larger of the shifted and the
    published first sample.  Keeps the request path and lets old shapes age
    out.

When a bundle is missing the last one received is shifted forward once per
missed step, and after ``MAX_MISSED`` missed steps the bootstrap values apply.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .controller import NeighborInputs, OcpSolution, shift_and_pad
from .network import OverlayNetwork

DOWN = "down"  # predecessor -> successor: r_out, s, r_hat_out
UP = "up"  # successor -> predecessor: r_in
MAX_MISSED = 3
BYTES_PER_SCALAR = 8
ALIGNMENTS = ("merged", "shifted", "published")


@dataclass(frozen=True)
class FeedbackBundle:
    src: int
    dst: int
    direction: str
    step: int
    circuits: tuple[int, ...]
    data: Mapping[str, np.ndarray]  # name -> (len(circuits), K)

    def row(self, circuit: int) -> dict[str, np.ndarray]:
        k = self.circuits.index(circuit)
        return {name: arr[k] for name, arr in self.data.items()}

    @property
    def scalars(self) -> int:
        return sum(int(a.size) for a in self.data.values())


def publish(net: OverlayNetwork, node: int, solution: OcpSolution, step: int) -> list[FeedbackBundle]:
    """One bundle per adjacent relay, covering the circuits shared on that edge."""
    succ: dict[int, list[int]] = {}
    pred: dict[int, list[int]] = {}
    for k, c in enumerate(solution.circuits):
        g = net.successor(c, node)
        b = net.predecessor(c, node)
        if g is not None:
            succ.setdefault(g, []).append(k)
        if b is not None:
            pred.setdefault(b, []).append(k)
    out = []
    for g in sorted(succ):
        rows = succ[g]
        circ = tuple(solution.circuits[k] for k in rows)
        data = {"r_out": solution.r_out[rows].copy(), "s": solution.s[rows].copy(),
                "r_hat_out": solution.r_hat_out[rows].copy()}
        out.append(FeedbackBundle(node, g, DOWN, step, circ, data))
    for b in sorted(pred):
        rows = pred[b]
        circ = tuple(solution.circuits[k] for k in rows)
        out.append(FeedbackBundle(node, b, UP, step, circ, {"r_in": solution.r_in[rows].copy()}))
    return out


def signaling_scalars(net: OverlayNetwork, k: int) -> int:
    """Scalars exchanged per global step: circuits per edge x K x 4 trajectories."""
    per_edge = sum(len(c.path) - 1 for c in net.circuits)
    return per_edge * k * 4


Bootstrap = Callable[[int, int], dict[str, np.ndarray]]


class FeedbackExchange:
    """Holds the latest bundle per directed edge and assembles controller inputs.

    ``source_bootstrap(circuit, node)`` returns ``r_out_beta``, ``s_beta`` and
    ``r_hat_out_beta`` for a circuit's first relay; ``sink_bootstrap`` returns
    ``r_in_gamma`` for its last relay.  Middle relays without usable feedback
    see zero trajectories.  ``drop`` is a test hook: bundles for which it
    returns true are discarded on publication.
    """

    def __init__(self, net: OverlayNetwork, k: int, source_bootstrap: Bootstrap,
                 sink_bootstrap: Bootstrap,
                 drop: Callable[[FeedbackBundle], bool] | None = None,
                 alignment: str = "merged"):
        if alignment not in ALIGNMENTS:
            raise ValueError(f"alignment must be one of {ALIGNMENTS}")
        self.net = net
        self.alignment = alignment
        self.k = k
        self.source_bootstrap = source_bootstrap
        self.sink_bootstrap = sink_bootstrap
        self.drop = drop
        self._latest: dict[tuple[int, int, str], FeedbackBundle] = {}
        self.scalars_sent = 0
        self.dropped = 0

    def deliver(self, bundles) -> None:
        for b in bundles:
            if self.drop is not None and self.drop(b):
                self.dropped += 1
                continue
            self._latest[(b.src, b.dst, b.direction)] = b
            self.scalars_sent += b.scalars

    def _aged(self, key, circuit: int, step: int, name: str, shift_extra: int):
        b = self._latest.get(key)
        if b is None or circuit not in b.circuits:
            return None
        missed = step - 1 - b.step
        if missed > MAX_MISSED or missed < 0:
            return None
        v = b.row(circuit)[name]
        for _ in range(missed + shift_extra):
            v = shift_and_pad(v)
        return v

    def collect(self, node: int, step: int) -> NeighborInputs:
        circuits = self.net.circuits_through(node)
        m, K = len(circuits), self.k
        r_out_b = np.zeros((m, K))
        s_b = np.zeros((m, K))
        rhat_b = np.zeros((m, K))
        r_in_g = np.zeros((m, K))
        for j, c in enumerate(circuits):
            b = self.net.predecessor(c, node)
            if b is None:
                boot = self.source_bootstrap(c, node)
                r_out_b[j], s_b[j], rhat_b[j] = boot["r_out_beta"], boot["s_beta"], boot["r_hat_out_beta"]
            else:
                key = (b, node, DOWN)
                vals = [self._aged(key, c, step, nm, 0) for nm in ("r_out", "s", "r_hat_out")]
                if vals[0] is not None:
                    r_out_b[j], s_b[j], rhat_b[j] = vals
            g = self.net.successor(c, node)
            if g is None:
                r_in_g[j] = self.sink_bootstrap(c, node)["r_in_gamma"]
            else:
                key = (g, node, UP)
                v = self._aged(key, c, step, "r_in", int(self.alignment != "published"))
                if v is not None:
                    if self.alignment == "merged":
                        v = v.copy()
                        v[0] = max(v[0], self._aged(key, c, step, "r_in", 0)[0])
                    r_in_g[j] = v
        return NeighborInputs(tuple(circuits), r_out_b, s_b, rhat_b, r_in_g)

"""Deterministic time-stepped overlay simulator.

Time advances in integer sub-steps (10 ms by default); every ``dt`` the
predictive controllers run.  Cells move in FIFO batches that share one entry
time.  Each relay has a drop-tail receive queue drained at ``cap_in`` into
per-circuit application queues, and a scheduler that moves cells from those
queues onto outgoing connections at up to ``cap_out`` (reduced by the throttle
factor).  Connections are reliable AIMD pipes with a fixed one-way latency.

Clients and sinks sit outside the relay set: each circuit has its own client
connection into the first relay and its own connection from the last relay to
the sink.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from .baselines import AimdConnState, CircuitWindowState, Link, pctcp_step, rr_allocate, vanilla_step
from .controller import ControllerConfig, ControllerError, solve_step
from .fairness import fairness_index, maxmin_waterfill
from .feedback import ALIGNMENTS, FeedbackExchange, publish, signaling_scalars
from .metrics import MetricsLog, throughput
from .network import (
    TOY_LINK_LATENCY, Circuit, Node, OverlayNetwork, TrafficSourceSpec, build_toy_topology,
    cells_to_kbps, kbps_to_cells,
)

ALGORITHMS = ("predictor", "vanilla", "pctcp")
SCENARIOS = ("toy1", "toy2", "random")
EPSILON_LATENCY = 0.001
WEB_OBJECT_KB = 320.0
WEB_JOIN_WINDOW = 5.0


class SimulationError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "toy2"
    algorithm: str = "predictor"
    n_relays: int = 20
    n_circuits: int = 50
    capacity_kbps: float = 1000.0
    latency: float = TOY_LINK_LATENCY
    fuzziness: float = 0.0
    dt: float = 0.1
    substep: float = 0.01
    duration: float = 40.0
    warmup: float = 5.0
    window: float = 2.0
    throttle: float = 0.0
    web_ratio: float = 0.0
    seed: int = 1
    horizon: int = 10
    discount: float = 1.0 / 3.0
    s_max: float = 3.0
    successor_alignment: str = "merged"
    repetitions: int = 1
    check_conservation: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not self.duration > self.warmup >= 0:
            raise ConfigError("need duration > warmup >= 0")
        if not 0 < self.window <= self.duration:
            raise ConfigError("window must lie in (0, duration]")
        if not 0.0 <= self.throttle <= 0.9:
            raise ConfigError("throttle must lie in [0, 0.9]")
        if self.fuzziness < 0:
            raise ConfigError("fuzziness must be >= 0")
        if not 0.0 <= self.web_ratio <= 1.0:
            raise ConfigError("web_ratio must lie in [0, 1]")
        if self.latency <= 0 or self.capacity_kbps <= 0:
            raise ConfigError("latency and capacity must be positive")
        if self.substep <= 0 or self.dt <= 0:
            raise ConfigError("dt and substep must be positive")
        ratio = self.dt / self.substep
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("dt must be a whole multiple of substep")
        if self.scenario == "random" and (self.n_relays < 3 or self.n_circuits < 1):
            raise ConfigError("random scenario needs >= 3 relays and >= 1 circuit")
        if self.horizon < 1 or not 0 < self.discount <= 1 or self.s_max <= 0:
            raise ConfigError("invalid controller parameters")
        if self.successor_alignment not in ALIGNMENTS:
            raise ConfigError(f"successor_alignment must be one of {ALIGNMENTS}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def apply_throttle(cfg: ScenarioConfig, factor: float) -> ScenarioConfig:
    """Scale every relay's application-layer send budget by ``1 - factor``."""
    if not 0.0 <= factor <= 0.9:
        raise ConfigError("throttle factor must lie in [0, 0.9]")
    return dataclasses.replace(cfg, throttle=float(factor))


def sample_link_latency(l: float, f: float, rng: np.random.Generator) -> float:
    """Uniform on ``[max(l(1-f), 1 ms), l(1+f)]``; exactly ``l`` when ``f == 0``.

    One uniform draw is consumed regardless of ``f`` so that sweeps over ``f``
    with one seed perturb the same links in the same direction.
    """
    if l <= 0 or f < 0:
        raise ConfigError("need l > 0 and f >= 0")
    u = rng.random()
    if f == 0:
        return l
    lo, hi = max(l * (1 - f), EPSILON_LATENCY), l * (1 + f)
    return lo + u * (hi - lo)


def generate_random_network(n_relays: int, n_circuits: int, rng: np.random.Generator,
                            capacity: float = kbps_to_cells(1000.0), hops: int = 3) -> OverlayNetwork:
    """``n_circuits`` paths of ``hops`` distinct relays chosen uniformly."""
    if n_relays < hops:
        raise ConfigError(f"need at least {hops} relays")
    nodes = tuple(Node(i, capacity, capacity) for i in range(n_relays))
    circuits = tuple(
        Circuit(k + 1, tuple(int(a) for a in rng.choice(n_relays, size=hops, replace=False)))
        for k in range(n_circuits)
    )
    return OverlayNetwork(nodes, circuits)


@dataclass
class TokenBucket:
    rate: float = 0.0  # cells/s
    depth: float = 0.0  # cells
    tokens: float = 0.0

    def set_rate(self, rate: float, dt: float) -> None:
        self.rate = max(float(rate), 0.0)
        self.depth = self.rate * dt
        self.tokens = min(self.tokens, self.depth)

    def refill(self, h: float) -> None:
        self.tokens = min(self.depth, self.tokens + self.rate * h)

    def available(self) -> int:
        return int(math.floor(self.tokens + 1e-9))

    def take(self, n: int) -> None:
        if n > self.available():
            raise SimulationError("token bucket overdrawn")
        self.tokens = max(self.tokens - n, 0.0)


# --------------------------------------------------------------------------
# Scenario assembly


def build_network(cfg: ScenarioConfig, rng_topo, rng_traffic) -> OverlayNetwork:
    if cfg.scenario in ("toy1", "toy2"):
        return build_toy_topology(1 if cfg.scenario == "toy1" else 2)
    net = generate_random_network(cfg.n_relays, cfg.n_circuits, rng_topo,
                                  capacity=kbps_to_cells(cfg.capacity_kbps))
    p = net.p
    n_web = int(round(cfg.web_ratio * p))
    web = set(int(i) for i in rng_traffic.permutation(p)[:n_web])
    sources = {}
    for k, c in enumerate(net.circuits):
        start = float(rng_traffic.uniform(0.0, 1.0))
        if k in web:
            sources[c.id] = TrafficSourceSpec("web", start=start + float(rng_traffic.uniform(0, WEB_JOIN_WINDOW)),
                                              object_kb=WEB_OBJECT_KB)
        else:
            sources[c.id] = TrafficSourceSpec("bulk", start=start)
    return net.with_sources(sources)


class _Source:
    """Client-side data availability for one circuit."""

    def __init__(self, spec: TrafficSourceSpec, h: float, rng):
        self.spec = spec
        self.h = h
        self.rng = rng
        self.start = int(math.ceil(spec.start / h - 1e-9))
        self.object_cells = int(round(spec.object_kb * 1024 / 512))
        self.remaining = 0  # web: cells of the current object not yet sent
        self.outstanding = 0  # web: sent but not yet delivered
        self.next_object = self.start
        self.objects = 0

    def _active(self, t: int) -> bool:
        if t < self.start:
            return False
        if self.spec.kind == "scripted":
            now = t * self.h
            return any(a - 1e-9 <= now < b - 1e-9 for a, b in self.spec.active)
        return True

    def available(self, t: int) -> float:
        if not self._active(t):
            return 0
        if self.spec.kind == "web":
            if self.remaining == 0 and self.outstanding == 0 and t >= self.next_object:
                self.remaining = self.object_cells
                self.objects += 1
            return self.remaining
        return math.inf

    def sent(self, n: int) -> None:
        if self.spec.kind == "web":
            self.remaining -= n
            self.outstanding += n

    def delivered(self, n: int, t: int) -> None:
        if self.spec.kind == "web":
            self.outstanding -= n
            if self.remaining == 0 and self.outstanding == 0:
                lo, hi = self.spec.pause
                self.next_object = t + int(round(self.rng.uniform(lo, hi) / self.h))


class _Conn:
    __slots__ = ("id", "src", "dst", "circuits", "lat", "state")

    def __init__(self, cid, src, dst, circuits, lat):
        self.id = cid
        self.src = src  # relay id or None (client)
        self.dst = dst  # relay id or None (sink)
        self.circuits = circuits
        self.lat = lat
        self.state = AimdConnState(rtt=2 * lat)


class _Relay:
    def __init__(self, node: Node, circuits, rx_limit: int, throttle: float):
        self.node = node
        self.circuits = circuits
        # per incoming connection: deque of [circuit, entry, n]
        self.rxq: dict[int, deque] = {}
        self.rx_conn: dict[int, _Conn] = {}
        self.rx_conn_len: dict[int, int] = {}
        self.rx_len = 0
        self.rx_limit = rx_limit
        self.rx_credit = 0.0
        self.tx_credit = 0.0
        self.tx_rate = node.cap_out * (1.0 - throttle)
        self.app = {c: deque() for c in circuits}  # circuit -> [entry, n]
        self.app_len = {c: 0 for c in circuits}
        self.out_conns: list[_Conn] = []
        self.links: list[Link] = []
        self.buckets = {c: TokenBucket() for c in circuits}

    def rx_by_circuit(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for q in self.rxq.values():
            for c, _, n in q:
                out[c] = out.get(c, 0) + n
        return out


_ARRIVE, _ACK, _LOSS, _SENDME = 0, 1, 2, 3


class Simulation:
    """One run.  Use :func:`run` unless you need to step manually."""

    def __init__(self, cfg: ScenarioConfig, net: OverlayNetwork | None = None, feedback_drop=None):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        s_topo, s_lat, s_traffic = ss.spawn(3)
        rng_topo = np.random.default_rng(s_topo)
        rng_lat = np.random.default_rng(s_lat)
        rng_traffic = np.random.default_rng(s_traffic)
        self.net = net if net is not None else build_network(cfg, rng_topo, rng_traffic)
        self.h = cfg.substep
        self.spd = int(round(cfg.dt / cfg.substep))
        self.n_sub = int(round(cfg.duration / cfg.substep))
        self.alg = cfg.algorithm
        net = self.net

        # latencies: relay edges in sorted order, then ingress/egress per circuit
        self.edge_lat = {}
        for e in sorted(net.edges):
            self.edge_lat[e] = self._to_sub(sample_link_latency(cfg.latency, cfg.fuzziness, rng_lat))
        self.in_lat, self.out_lat = {}, {}
        for c in net.circuits:
            self.in_lat[c.id] = self._to_sub(sample_link_latency(cfg.latency, cfg.fuzziness, rng_lat))
            self.out_lat[c.id] = self._to_sub(sample_link_latency(cfg.latency, cfg.fuzziness, rng_lat))
        self.path_lat = {
            c.id: self.in_lat[c.id] + self.out_lat[c.id]
            + sum(self.edge_lat[(a, b)] for a, b in zip(c.path, c.path[1:]))
            for c in net.circuits
        }

        rtt = 2 * cfg.latency
        self.relays: dict[int, _Relay] = {}
        for node in net.nodes:
            limit = max(1, int(round(2 * node.cap_in * rtt)))
            self.relays[node.id] = _Relay(node, net.circuits_through(node.id), limit, cfg.throttle)

        # connections
        self.conns: list[_Conn] = []
        self.client_conn: dict[int, _Conn] = {}
        self.hop_conn: dict[tuple[int, int], _Conn] = {}  # (relay, circuit) -> outgoing conn
        for c in net.circuits:
            cn = self._new_conn(None, c.path[0], (c.id,), self.in_lat[c.id])
            self.client_conn[c.id] = cn
        shared: dict[tuple[int, int], _Conn] = {}
        for c in net.circuits:
            for a, b in zip(c.path, c.path[1:]):
                if self.alg == "vanilla":
                    if (a, b) not in shared:
                        carried = tuple(x.id for x in net.circuits
                                        if any(e == (a, b) for e in zip(x.path, x.path[1:])))
                        shared[(a, b)] = self._new_conn(a, b, carried, self.edge_lat[(a, b)])
                    self.hop_conn[(a, c.id)] = shared[(a, b)]
                else:
                    self.hop_conn[(a, c.id)] = self._new_conn(a, b, (c.id,), self.edge_lat[(a, b)])
            last = c.path[-1]
            self.hop_conn[(last, c.id)] = self._new_conn(last, None, (c.id,), self.out_lat[c.id])
        for cn in self.conns:
            if cn.src is not None:
                r = self.relays[cn.src]
                r.out_conns.append(cn)
                r.links.append(Link(cn.state, cn.circuits))

        self.sources = {c.id: _Source(c.source, self.h, rng_traffic) for c in net.circuits}
        self.windows = {c.id: CircuitWindowState() for c in net.circuits}
        self.inject = {c.id: TokenBucket() for c in net.circuits}
        self.calendar: dict[int, list] = defaultdict(list)
        self.injected = {c.id: 0 for c in net.circuits}
        self.delivered = {c.id: 0 for c in net.circuits}
        self.t = 0
        self.step = 0
        self.log = MetricsLog(circuits=tuple(c.id for c in net.circuits))
        self.log.meta.update(algorithm=cfg.algorithm, seed=cfg.seed, config_hash=cfg.config_hash(),
                             scenario=cfg.scenario)
        self.ctrl_cfg = ControllerConfig(n_horz=cfg.horizon, d=cfg.discount, dt=cfg.dt, s_max=cfg.s_max)
        self.feedback = None
        if self.alg == "predictor":
            self.feedback = FeedbackExchange(net, self.ctrl_cfg.k, self._source_boot, self._sink_boot,
                                             drop=feedback_drop,
                                             alignment=cfg.successor_alignment)
        self.solutions = {}

    def _to_sub(self, seconds: float) -> int:
        return max(1, int(math.ceil(seconds / self.h - 1e-9)))

    def _new_conn(self, src, dst, circuits, lat) -> _Conn:
        cn = _Conn(len(self.conns), src, dst, circuits, lat)
        self.conns.append(cn)
        return cn

    # -- controller plumbing ------------------------------------------------

    def _source_boot(self, circuit: int, node: int):
        K = self.ctrl_cfg.k
        cap = self.net.node_by_id[node].cap_in
        avail = self.sources[circuit].available(self.t)
        big = (K + 1) * cap * self.cfg.dt
        s = big if math.isinf(avail) else float(avail)
        rhat = cap if avail > 0 else 0.0
        return {"r_out_beta": np.zeros(K), "s_beta": np.full(K, s), "r_hat_out_beta": np.full(K, rhat)}

    def _sink_boot(self, circuit: int, node: int):
        r = self.relays[node]
        return {"r_in_gamma": np.full(self.ctrl_cfg.k, r.tx_rate)}

    def _control(self) -> None:
        sols = {}
        for nid in sorted(self.relays):
            r = self.relays[nid]
            if not r.circuits:
                continue
            inputs = self.feedback.collect(nid, self.step)
            # cells already received but not yet read also occupy the circuit
            pending = r.rx_by_circuit()
            s0 = [r.app_len[c] + pending.get(c, 0) for c in r.circuits]
            try:
                sol = solve_step(r.node.cap_in, r.tx_rate, s0, inputs, self.ctrl_cfg)
            except ControllerError as exc:
                raise SimulationError(f"relay {nid} step {self.step}: {exc}") from exc
            sols[nid] = sol
            self.log.total_solves += 1
            self.log.relaxed_solves += int(sol.relaxed)
        bundles = []
        for nid, sol in sols.items():
            bundles.extend(publish(self.net, nid, sol, self.step))
            r = self.relays[nid]
            for c, rate in sol.first_out().items():
                r.buckets[c].set_rate(rate, self.cfg.dt)
        for c in self.net.circuits:
            first = sols.get(c.path[0])
            if first is not None:
                self.inject[c.id].set_rate(first.first_in()[c.id], self.cfg.dt)
        self.feedback.deliver(bundles)
        self.solutions = sols

    # -- transport ------------------------------------------------------------

    def _send(self, cn: _Conn, circuit: int, entry: int, n: int) -> None:
        cn.state.in_flight += n
        self.calendar[self.t + cn.lat].append((_ARRIVE, cn, circuit, entry, n))

    def _events(self) -> None:
        t = self.t
        evs = self.calendar.pop(t, ())
        for ev in evs:
            kind, cn, circuit, entry, n = ev
            if kind == _ARRIVE:
                if cn.dst is None:
                    self._deliver(cn, circuit, entry, n)
                    continue
                r = self.relays[cn.dst]
                if cn.id not in r.rxq:
                    r.rxq[cn.id] = deque()
                    r.rx_conn[cn.id] = cn
                    r.rx_conn_len[cn.id] = 0
                # each connection has its own drop-tail receive buffer
                take = min(r.rx_limit - r.rx_conn_len[cn.id], n)
                if take > 0:
                    r.rxq[cn.id].append([circuit, entry, take])
                    r.rx_conn_len[cn.id] += take
                    r.rx_len += take
                if n - take > 0:
                    # the sender learns about the loss about one one-way delay later
                    self.calendar[t + cn.lat].append((_LOSS, cn, circuit, entry, n - take))
            elif kind == _ACK:
                cn.state.on_ack(n)
            elif kind == _LOSS:
                cn.state.on_loss(circuit, entry, n, t)
            elif kind == _SENDME:
                self.windows[circuit].on_sendme(n)

    def _deliver(self, cn: _Conn, circuit: int, entry: int, n: int) -> None:
        t = self.t
        self.delivered[circuit] += n
        self.log.record(circuit, entry * self.h, t * self.h, n)
        self.calendar[t + cn.lat].append((_ACK, cn, circuit, entry, n))
        self.sources[circuit].delivered(n, t)
        if self.alg != "predictor":
            k = self.windows[circuit].on_deliver(n)
            if k:
                self.calendar[t + self.path_lat[circuit]].append((_SENDME, None, circuit, 0, k))

    def _drain_rx(self, r: _Relay) -> None:
        """Read from the receive buffers at ``cap_in``, round-robin over connections."""
        if r.rx_len == 0:
            r.rx_credit = 0.0
            return
        r.rx_credit += r.node.cap_in * self.h
        budget = int(math.floor(r.rx_credit + 1e-9))
        ids = sorted(i for i, q in r.rxq.items() if q)
        lens = [r.rx_conn_len[i] for i in ids]
        grant = rr_allocate(lens, budget, self.t % max(len(ids), 1))
        t = self.t
        taken = 0
        for i, g in zip(ids, grant):
            q, cn = r.rxq[i], r.rx_conn[i]
            taken += g
            r.rx_conn_len[i] -= g
            while g > 0:
                item = q[0]
                circuit, entry, n = item
                k = min(n, g)
                if k == n:
                    q.popleft()
                else:
                    item[2] -= k
                g -= k
                self._enqueue_app(r, circuit, entry, k)
                self.calendar[t + cn.lat].append((_ACK, cn, circuit, entry, k))
        r.rx_len -= taken
        r.rx_credit -= taken
        if r.rx_len == 0:
            r.rx_credit = 0.0

    @staticmethod
    def _enqueue_app(r: _Relay, circuit: int, entry: int, n: int) -> None:
        q = r.app[circuit]
        if q and q[-1][0] == entry:
            q[-1][1] += n
        else:
            q.append([entry, n])
        r.app_len[circuit] += n

    def _sources(self) -> None:
        t = self.t
        pred = self.alg == "predictor"
        for c in self.net.circuits:
            cid = c.id
            cn = self.client_conn[cid]
            st = cn.state
            # retransmissions first, they do not consume fresh allowance
            win = st.window()
            while win > 0 and st.retx:
                b = st.retx[0]
                k = min(b[2], win)
                self._send(cn, b[0], b[1], k)
                win -= k
                if k == b[2]:
                    st.retx.popleft()
                else:
                    b[2] -= k
            if win <= 0:
                continue
            src = self.sources[cid]
            avail = src.available(t)
            if avail <= 0:
                continue
            if pred:
                bucket = self.inject[cid]
                bucket.refill(self.h)
                n = min(win, bucket.available(), avail)
                if n > 0:
                    bucket.take(n)
            else:
                n = min(win, self.windows[cid].package_window, avail)
                if n > 0:
                    self.windows[cid].on_send(n)
            n = int(n)
            if n > 0:
                src.sent(n)
                self.injected[cid] += n
                self._send(cn, cid, t, n)

    def _schedule(self, r: _Relay, rotation: int) -> None:
        r.tx_credit += r.tx_rate * self.h
        budget = int(math.floor(r.tx_credit + 1e-9))
        if self.alg == "predictor":
            for b in r.buckets.values():
                b.refill(self.h)
        if budget <= 0:
            return
        has_retx = any(cn.state.retx for cn in r.out_conns)
        if not has_retx and not any(r.app_len.values()):
            r.tx_credit = min(r.tx_credit, r.tx_rate * self.h)
            return
        if self.alg == "vanilla":
            plan = vanilla_step(r.links, r.app_len, budget, rotation)
        else:
            limit = None
            if self.alg == "predictor":
                limit = {c: b.available() for c, b in r.buckets.items()}
            plan = pctcp_step(r.links, r.app_len, budget, rotation, limit)
        sent = 0
        for j, circuit, n in plan:
            cn = r.out_conns[j]
            if circuit is None:
                left = n
                while left > 0:
                    b = cn.state.retx[0]
                    k = min(b[2], left)
                    self._send(cn, b[0], b[1], k)
                    left -= k
                    if k == b[2]:
                        cn.state.retx.popleft()
                    else:
                        b[2] -= k
            else:
                q = r.app[circuit]
                left = n
                while left > 0:
                    b = q[0]
                    k = min(b[1], left)
                    self._send(cn, circuit, b[0], k)
                    left -= k
                    if k == b[1]:
                        q.popleft()
                    else:
                        b[1] -= k
                r.app_len[circuit] -= n
                if self.alg == "predictor":
                    r.buckets[circuit].take(n)
            sent += n
        r.tx_credit -= sent
        # an idle scheduler does not bank more than one sub-step of credit
        r.tx_credit = min(r.tx_credit, r.tx_rate * self.h)

    # -- bookkeeping ----------------------------------------------------------

    def in_network(self) -> dict[int, int]:
        cnt = {c.id: 0 for c in self.net.circuits}
        for r in self.relays.values():
            for c, n in r.app_len.items():
                cnt[c] += n
            for q in r.rxq.values():
                for c, _, n in q:
                    cnt[c] += n
        for cn in self.conns:
            for c, _, n in cn.state.retx:
                cnt[c] += n
        for evs in self.calendar.values():
            for kind, _, c, _, n in evs:
                if kind in (_ARRIVE, _LOSS):
                    cnt[c] += n
        return cnt

    def check_conservation(self) -> bool:
        inn = self.in_network()
        ok = all(self.injected[c] == self.delivered[c] + inn[c] for c in inn)
        if not ok:
            self.log.conservation_violations += 1
        return ok

    def backlog(self) -> int:
        return sum(sum(r.app_len.values()) for r in self.relays.values())

    def advance(self) -> None:
        """Run one controller step (``dt``)."""
        if self.alg == "predictor":
            self._control()
        order = sorted(self.relays)
        for _ in range(self.spd):
            if self.t >= self.n_sub:
                break
            self._events()
            for nid in order:
                self._drain_rx(self.relays[nid])
            self._sources()
            rot = self.t
            for nid in order:
                self._schedule(self.relays[nid], rot)
            self.t += 1
        self.step += 1
        self.log.backlog_t.append(self.t * self.h)
        self.log.backlog_cells.append(self.backlog())
        if self.cfg.check_conservation:
            self.check_conservation()

    def finish(self) -> MetricsLog:
        cfg, log = self.cfg, self.log
        end = self.t * self.h
        log.window = (end - cfg.window, end)
        log.latency_since = cfg.warmup
        if self.feedback is not None:
            log.feedback_scalars_per_step = float(signaling_scalars(self.net, self.ctrl_cfg.k))
        bulk_only = all(c.source.kind != "web" for c in self.net.circuits)
        if bulk_only:
            demand = {}
            t0, t1 = log.window
            for c in self.net.circuits:
                src = c.source
                if src.start > t0:
                    demand[c.id] = 0.0
                elif src.kind == "scripted":
                    on = any(a <= t0 and b >= t1 for a, b in src.active)
                    if not on:
                        demand[c.id] = 0.0
            eff = OverlayNetwork(
                tuple(Node(n.id, n.cap_in, n.cap_out * (1 - cfg.throttle)) for n in self.net.nodes),
                self.net.circuits)
            fair = maxmin_waterfill(eff, demand or None).rates
            fair_kb = {c: cells_to_kbps(v) for c, v in fair.items()}
            log.fair_rates = fair_kb
            if sum(fair_kb.values()) > 0:
                log.fairness_index = fairness_index(throughput(log), fair_kb)
        return log


def run(cfg: ScenarioConfig, net: OverlayNetwork | None = None, feedback_drop=None) -> MetricsLog:
    """Execute a full scenario and return its measurements."""
    sim = Simulation(cfg, net=net, feedback_drop=feedback_drop)
    steps = int(math.ceil(sim.n_sub / sim.spd))
    for _ in range(steps):
        sim.advance()
    if cfg.check_conservation and sim.log.conservation_violations:
        raise SimulationError(f"{sim.log.conservation_violations} conservation violations")
    return sim.finish()

"""Global max-min fair allocations and the fairness index."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .network import OverlayNetwork
from .qp import OPTIMAL, QpProblem, solve_qp

RateVector = Mapping[int, float]


class FairnessError(ValueError):
    pass


@dataclass
class FairnessResult:
    rates: dict[int, float]
    delta_r: dict[int, float]
    r_max: float
    objective: float
    # None marks a circuit limited by its own demand rather than a relay
    bottleneck_of: dict[int, int | None]


def _node_caps(net: OverlayNetwork) -> dict[int, float]:
    # in and out constraints cover the same circuit set, so the tighter one wins
    return {n.id: min(n.cap_in, n.cap_out) for n in net.nodes}


def is_feasible(net: OverlayNetwork, r: RateVector, tol: float = 1e-9) -> bool:
    missing = [c.id for c in net.circuits if c.id not in r]
    if missing:
        raise FairnessError(f"rate vector lacks circuits {missing}")
    if any(r[c.id] < -tol for c in net.circuits):
        return False
    for node in net.nodes:
        load = sum(r[i] for i in net.circuits_through(node.id))
        cap = min(node.cap_in, node.cap_out)
        if load > cap * (1 + tol) + tol:
            return False
    return True


def _bottlenecks(
    net: OverlayNetwork, rates: RateVector, demand: RateVector | None, rtol: float
) -> dict[int, int | None]:
    """A saturated relay on the path where the circuit's rate is maximal."""
    caps = _node_caps(net)
    load = {a: sum(rates[i] for i in net.circuits_through(a)) for a in caps}
    out: dict[int, int | None] = {}
    for c in net.circuits:
        ri = rates[c.id]
        best, best_key = None, None
        for a in c.path:
            slack = (caps[a] - load[a]) / caps[a]
            top = max(rates[j] for j in net.circuits_through(a))
            # rank: saturated and maximal first, then the least slack
            key = (not (slack <= rtol and ri >= top * (1 - rtol) - rtol), slack, a)
            if best_key is None or key < best_key:
                best, best_key = a, key
        if demand is not None and c.id in demand and ri >= demand[c.id] * (1 - rtol):
            if best_key is None or best_key[0]:
                best = None
        out[c.id] = best
    return out


def maxmin_qp(
    net: OverlayNetwork,
    r_max: float | None = None,
    demand: RateVector | None = None,
    tol: float = 1e-10,
) -> FairnessResult:
    """Unused-rate minimisation: min sum(dr_i^2), r = r_max - dr, capacity-feasible.

    Solved in units of ``r_max`` for conditioning. ``r_max`` defaults to twice
    the largest node capacity.
    """
    cmax = net.max_capacity()
    if r_max is None:
        r_max = 2.0 * cmax
    if r_max < cmax * (1 - 1e-12):
        raise FairnessError(f"r_max={r_max} below largest capacity {cmax}")
    ids = [c.id for c in net.circuits]
    p = len(ids)
    if p == 0:
        return FairnessResult({}, {}, r_max, 0.0, {})
    col = {cid: k for k, cid in enumerate(ids)}
    rows, h = [], []
    for node in net.nodes:
        through = net.circuits_through(node.id)
        if not through:
            continue
        for cap in (node.cap_in, node.cap_out):
            # sum(1 - d_i) <= cap / r_max
            g = np.zeros(p)
            g[[col[i] for i in through]] = -1.0
            rows.append(g)
            h.append(cap / r_max - len(through))
    eye = np.eye(p)
    rows.extend(eye)
    h.extend([1.0] * p)
    rows.extend(-eye)
    lo = np.zeros(p)
    if demand is not None:
        for cid, dem in demand.items():
            if cid in col:
                lo[col[cid]] = max(0.0, 1.0 - max(dem, 0.0) / r_max)
    h.extend(-lo)
    prob = QpProblem(Q=2.0 * np.eye(p), c=np.zeros(p), G=np.array(rows), h=np.array(h))
    sol = solve_qp(prob, tol=tol, max_iter=200)
    if sol.status != OPTIMAL:
        # tolerance may be below what the factorisation can reach
        sol = solve_qp(prob, tol=1e-8, max_iter=200)
    if sol.status != OPTIMAL:
        raise FairnessError(f"fairness QP failed: {sol.status}")
    d = np.clip(sol.x, 0.0, 1.0)
    rates = {cid: float(r_max * (1.0 - d[col[cid]])) for cid in ids}
    delta = {cid: float(r_max * d[col[cid]]) for cid in ids}
    objective = float(np.sum((r_max * d) ** 2))
    return FairnessResult(rates, delta, r_max, objective, _bottlenecks(net, rates, demand, 1e-6))


def maxmin_waterfill(net: OverlayNetwork, demand: RateVector | None = None) -> FairnessResult:
    """Progressive filling with optional per-circuit demand caps."""
    caps = _node_caps(net)
    rates = {c.id: 0.0 for c in net.circuits}
    bottleneck: dict[int, int | None] = {}
    active = set(rates)
    dem = {cid: (np.inf if demand is None else float(demand.get(cid, np.inf))) for cid in rates}
    for cid in list(active):
        if dem[cid] <= 0:
            rates[cid] = 0.0
            bottleneck[cid] = None
            active.discard(cid)
    residual = dict(caps)
    level = 0.0
    while active:
        inc = np.inf
        for a, cap in residual.items():
            k = sum(1 for i in net.circuits_through(a) if i in active)
            if k:
                inc = min(inc, cap / k)
        for cid in active:
            inc = min(inc, dem[cid] - level)
        inc = max(inc, 0.0)
        level += inc
        for a in residual:
            k = sum(1 for i in net.circuits_through(a) if i in active)
            residual[a] -= inc * k
        for cid in active:
            rates[cid] = level
        eps = 1e-12 * max(1.0, level)
        frozen = set()
        for a in sorted(residual):
            if residual[a] <= eps * max(1.0, caps[a]):
                for i in net.circuits_through(a):
                    if i in active and i not in frozen:
                        frozen.add(i)
                        bottleneck[i] = a
        for cid in active:
            if cid not in frozen and dem[cid] - level <= eps:
                frozen.add(cid)
                bottleneck[cid] = None
        if not frozen:  # numerical guard; should not happen
            raise FairnessError("progressive filling made no progress")
        active -= frozen
    r_max = 2.0 * net.max_capacity() if net.nodes else 0.0
    delta = {cid: r_max - v for cid, v in rates.items()}
    obj = float(sum(v * v for v in delta.values()))
    return FairnessResult(rates, delta, r_max, obj, bottleneck)


def fairness_index(observed: RateVector, fair: RateVector) -> float:
    """F = 1 - sum|fair_i - obs_i| / sum fair_i."""
    if set(observed) != set(fair):
        raise FairnessError("observed and fair vectors cover different circuits")
    total = float(sum(fair.values()))
    if total <= 0:
        raise FairnessError("fair vector sums to zero; index undefined")
    dist = float(sum(abs(fair[k] - observed[k]) for k in fair))
    return 1.0 - dist / total

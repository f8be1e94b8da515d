"""Run measurements: per-cell latency, throughput, backlog, fairness, signaling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .network import CELL_BYTES, KB


class MetricsError(ValueError):
    pass


@dataclass
class MetricsLog:
    """Everything a run records.

    Latency records are stored per delivered batch of cells sharing one entry
    and one exit time; ``cells`` gives the batch size.
    """

    circuits: tuple[int, ...] = ()
    rec_circuit: list = field(default_factory=list)
    rec_entry: list = field(default_factory=list)
    rec_exit: list = field(default_factory=list)
    rec_cells: list = field(default_factory=list)
    backlog_t: list = field(default_factory=list)
    backlog_cells: list = field(default_factory=list)
    window: tuple[float, float] = (0.0, 0.0)
    latency_since: float = 0.0
    fairness_index: float | None = None
    fair_rates: dict | None = None
    feedback_scalars_per_step: float = 0.0
    relaxed_solves: int = 0
    total_solves: int = 0
    conservation_violations: int = 0
    meta: dict = field(default_factory=dict)

    def record(self, circuit: int, entry: float, exit_: float, cells: int) -> None:
        if exit_ < entry:
            raise MetricsError("exit before entry")
        self.rec_circuit.append(circuit)
        self.rec_entry.append(entry)
        self.rec_exit.append(exit_)
        self.rec_cells.append(cells)

    def arrays(self):
        return (np.asarray(self.rec_circuit, dtype=np.int64), np.asarray(self.rec_entry, dtype=float),
                np.asarray(self.rec_exit, dtype=float), np.asarray(self.rec_cells, dtype=np.int64))

    def total_cells(self) -> int:
        return int(sum(self.rec_cells))


def _select(log: MetricsLog, circuits=None, since=None, until=None):
    c, en, ex, n = log.arrays()
    mask = np.ones(c.size, dtype=bool)
    if circuits is not None:
        mask &= np.isin(c, list(circuits))
    if since is not None:
        mask &= ex >= since
    if until is not None:
        mask &= ex <= until
    return c[mask], en[mask], ex[mask], n[mask]


def mean_latency(log: MetricsLog, circuits: Iterable[int] | None = None,
                 since: float | None = None, until: float | None = None) -> float:
    """Byte-weighted mean of exit minus entry time, in seconds."""
    _, en, ex, n = _select(log, circuits, since, until)
    if n.sum() == 0:
        raise MetricsError("no latency records in selection")
    return float(np.sum((ex - en) * n) / np.sum(n))


def throughput(log: MetricsLog, window: tuple[float, float] | None = None) -> dict[int, float]:
    """Per-circuit delivered rate in KB/s over ``window`` (exit time in (t0, t1])."""
    t0, t1 = log.window if window is None else window
    if t1 <= t0:
        raise MetricsError("empty throughput window")
    c, _, ex, n = log.arrays()
    mask = (ex > t0) & (ex <= t1)
    out = {cid: 0.0 for cid in log.circuits}
    for cid, cells in zip(c[mask], n[mask]):
        out[int(cid)] = out.get(int(cid), 0.0) + float(cells)
    return {cid: v * CELL_BYTES / KB / (t1 - t0) for cid, v in out.items()}


def latency_histogram(log: MetricsLog, bin_width: float, since: float | None = None):
    """Bytes per latency bin ``[j*w, (j+1)*w)``; returns ``(edges, counts)``."""
    if bin_width <= 0:
        raise MetricsError("bin_width must be positive")
    _, en, ex, n = _select(log, since=since)
    if n.size == 0:
        return np.array([0.0, bin_width]), np.zeros(1, dtype=np.int64)
    lat = ex - en
    # guard against 0.09/0.03 -> 2.9999999 style rounding
    idx = np.floor(lat / bin_width + 1e-9).astype(np.int64)
    counts = np.bincount(idx, weights=n * CELL_BYTES).astype(np.int64)
    edges = np.arange(counts.size + 1) * bin_width
    return edges, counts


def mean_backlog(log: MetricsLog, since: float | None = None) -> float:
    t = np.asarray(log.backlog_t)
    b = np.asarray(log.backlog_cells, dtype=float)
    if since is not None:
        b = b[t >= since]
    return float(b.mean()) if b.size else 0.0


def summary_row(log: MetricsLog) -> dict:
    rates = throughput(log)
    try:
        lat = mean_latency(log, since=log.latency_since)
    except MetricsError:
        lat = float("nan")
    return {
        "run_id": log.meta.get("run_id", ""),
        "algorithm": log.meta.get("algorithm", ""),
        "mean_latency_s": lat,
        "total_throughput": float(sum(rates.values())),
        "fairness_index": "" if log.fairness_index is None else log.fairness_index,
        "mean_backlog_cells": mean_backlog(log, since=log.latency_since),
        "feedback_scalars_per_step": log.feedback_scalars_per_step,
        "config_hash": log.meta.get("config_hash", ""),
        "seed": log.meta.get("seed", ""),
    }


SUMMARY_FIELDS = ["run_id", "algorithm", "mean_latency_s", "total_throughput", "fairness_index",
                  "mean_backlog_cells", "feedback_scalars_per_step", "config_hash", "seed"]


def write_latency_csv(log: MetricsLog, path: Path) -> None:
    c, en, ex, n = log.arrays()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["circuit_id", "entry_s", "exit_s", "bytes"])
        for row in zip(c, en, ex, n):
            w.writerow([int(row[0]), f"{row[1]:.6f}", f"{row[2]:.6f}", int(row[3]) * CELL_BYTES])


def write_throughput_csv(log: MetricsLog, path: Path) -> None:
    t0, t1 = log.window
    rates = throughput(log)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["circuit_id", "bytes", "rate"])
        for cid in sorted(rates):
            w.writerow([cid, round(rates[cid] * KB * (t1 - t0)), f"{rates[cid]:.6f}"])


def write_summary_csv(rows: list[dict], path: Path, fields=None) -> None:
    fields = fields or SUMMARY_FIELDS
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})

"""Command line entry point: ``overlaycc run | sweep | fair``.

Config and sweep files are flat ``key = value`` text (``#`` comments allowed,
no sections).  Keys::

    scenario algorithm relays circuits capacity_kbps latency fuzziness dt
    substep duration warmup window throttle web_ratio seed horizon discount
    s_max successor_alignment reps check_conservation

Sweep files additionally take ``sweep`` (circuits | fuzziness | throttle |
web_ratio), ``values`` and ``algorithms`` (comma separated).  Command-line
flags override file values.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fairness import FairnessError, maxmin_qp, maxmin_waterfill
from .metrics import SUMMARY_FIELDS, summary_row, write_latency_csv, write_summary_csv, write_throughput_csv
from .network import OverlayNetwork, TopologyError, build_toy_topology, cells_to_kbps, network_from_lists
from .sim import ALGORITHMS, ConfigError, ScenarioConfig, SimulationError, run

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# file/flag key -> ScenarioConfig field
_ALIASES = {"relays": "n_relays", "circuits": "n_circuits", "reps": "repetitions"}
_FIELDS = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
CONFIG_KEYS = sorted({_k for _k in _FIELDS if _k not in _ALIASES.values()} | set(_ALIASES))
SWEEP_PARAMS = {"circuits": "n_circuits", "fuzziness": "fuzziness", "throttle": "throttle",
                "web_ratio": "web_ratio"}
SWEEP_KEYS = ("sweep", "values", "algorithms")
AGG_METRICS = ("mean_latency_s", "total_throughput", "fairness_index", "mean_backlog_cells",
               "feedback_scalars_per_step")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _coerce(key: str, raw: str):
    name = _ALIASES.get(key, key)
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return name, low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return name, int(raw)
        if isinstance(default, float):
            return name, float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return name, raw


def read_flat_file(path: str | Path, allowed: tuple[str, ...] | list[str]) -> dict[str, str]:
    """Parse a section-less ``key = value`` file; unknown keys are errors."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string("[top]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cp.sections() != ["top"]:
        raise ConfigError(f"{path}: sections are not allowed")
    out = dict(cp["top"])
    unknown = sorted(set(out) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return out


def build_config(file_values: dict[str, str], overrides: dict) -> ScenarioConfig:
    kw = {}
    for key, raw in file_values.items():
        if key in SWEEP_KEYS:
            continue
        name, val = _coerce(key, raw)
        kw[name] = val
    for key, val in overrides.items():
        if val is not None:
            kw[_ALIASES.get(key, key)] = val
    return ScenarioConfig(**kw)


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--scenario", choices=("toy1", "toy2", "random"))
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--relays", type=int)
    p.add_argument("--circuits", type=int)
    p.add_argument("--fuzziness", type=float)
    p.add_argument("--throttle", type=float)
    p.add_argument("--web-ratio", dest="web_ratio", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--discount", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--out-dir", dest="out_dir", default="out")


_FLAG_KEYS = ("scenario", "algorithm", "relays", "circuits", "fuzziness", "throttle", "web_ratio", "dt",
              "horizon", "discount", "duration", "warmup", "seed", "reps")


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in _FLAG_KEYS}


# --------------------------------------------------------------------------
# run


def _run_id(cfg: ScenarioConfig) -> str:
    return f"{cfg.scenario}-{cfg.algorithm}-seed{cfg.seed}-{cfg.config_hash()}"


def _execute(cfg: ScenarioConfig, out_dir: Path | None = None) -> dict:
    log = run(cfg)
    log.meta.update(run_id=_run_id(cfg), algorithm=cfg.algorithm, config_hash=cfg.config_hash(), seed=cfg.seed)
    if out_dir is not None:
        d = out_dir / log.meta["run_id"]
        d.mkdir(parents=True, exist_ok=True)
        write_latency_csv(log, d / "latency.csv")
        write_throughput_csv(log, d / "throughput.csv")
    return summary_row(log)


def _fmt(row: dict) -> str:
    f = row["fairness_index"]
    f = "n/a" if f == "" else f"{f:.3f}"
    return (f"{row['run_id']}: latency {row['mean_latency_s'] * 1000:.1f} ms, "
            f"throughput {row['total_throughput']:.1f} KB/s, fairness_index {f}, "
            f"backlog {row['mean_backlog_cells']:.1f} cells")


def cmd_run(args) -> int:
    values = read_flat_file(args.config, CONFIG_KEYS) if args.config else {}
    base = build_config(values, _overrides(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        for rep in range(base.repetitions):
            cfg = dataclasses.replace(base, seed=base.seed + rep)
            row = _execute(cfg, out)
            rows.append(row)
            print(_fmt(row), flush=True)
    finally:
        if rows:
            write_summary_csv(rows, out / "summary.csv")
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class SweepSpec:
    base: ScenarioConfig
    parameter: str
    values: tuple
    algorithms: tuple[str, ...]
    repetitions: int

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMS:
            raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"bad algorithm list {list(self.algorithms)}")

    def configs(self) -> list[tuple[object, str, ScenarioConfig]]:
        """Every run in output order: by value, then algorithm, then seed."""
        field_ = SWEEP_PARAMS[self.parameter]
        out = []
        for v in self.values:
            for alg in self.algorithms:
                for rep in range(self.repetitions):
                    cfg = dataclasses.replace(self.base, algorithm=alg, seed=self.base.seed + rep,
                                              repetitions=1, **{field_: v})
                    out.append((v, alg, cfg))
        return out


def load_sweep(path: str, overrides: dict) -> SweepSpec:
    values = read_flat_file(path, CONFIG_KEYS + list(SWEEP_KEYS))
    for key in ("sweep", "values"):
        if key not in values:
            raise ConfigError(f"{path}: missing key {key!r}")
    param = values["sweep"].strip()
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    caster = int if param == "circuits" else float
    try:
        vals = tuple(caster(v) for v in values["values"].split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{path}: bad values list") from None
    if overrides.get("algorithm"):
        algs = (overrides["algorithm"],)
    else:
        algs = tuple(a.strip() for a in values.get("algorithms", "predictor").split(",") if a.strip())
    # the swept value replaces the base one, so validate the base with the first value
    ov = {k: v for k, v in overrides.items() if k != "algorithm"}
    if vals:
        ov[SWEEP_PARAMS[param]] = vals[0]
    base = build_config(values, ov)
    return SweepSpec(base, param, vals, algs, base.repetitions)


def aggregate(spec: SweepSpec, rows: list[dict]) -> list[dict]:
    out = []
    per = spec.repetitions
    for i in range(0, len(rows), per):
        chunk = rows[i:i + per]
        agg = {"parameter": spec.parameter, "value": chunk[0]["value"], "algorithm": chunk[0]["algorithm"],
               "runs": len(chunk)}
        for k in AGG_METRICS:
            vals = [r[k] for r in chunk if r[k] != ""]
            agg[k] = float(np.mean(vals)) if vals else ""
        agg["config_hash"] = ";".join(str(r["config_hash"]) for r in chunk)
        agg["seed"] = ";".join(str(r["seed"]) for r in chunk)
        out.append(agg)
    return out


AGG_FIELDS = ["parameter", "value", "algorithm", "runs", *AGG_METRICS, "config_hash", "seed"]


def cmd_sweep(args) -> int:
    spec = load_sweep(args.spec, _overrides(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = spec.configs()
    rows: list[dict] = []
    failure = None
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_execute, cfg) for _, _, cfg in plan]
            for (v, _, _), fut in zip(plan, futures):
                try:
                    row = fut.result()
                except (SimulationError, ConfigError) as exc:
                    failure = exc
                    break
                row["value"] = v
                rows.append(row)
    else:
        for v, _, cfg in plan:
            try:
                row = _execute(cfg)
            except (SimulationError, ConfigError) as exc:
                failure = exc
                break
            row["value"] = v
            rows.append(row)
            print(f"{spec.parameter}={v} " + _fmt(row), flush=True)
    write_summary_csv(rows, out / "runs.csv", fields=["value", *SUMMARY_FIELDS])
    if failure is not None:
        print(f"sweep aborted after {len(rows)} runs: {failure}", file=sys.stderr)
        print(f"partial results in {out / 'runs.csv'}", file=sys.stderr)
        return EXIT_RUNTIME
    write_summary_csv(aggregate(spec, rows), out / "sweep.csv", fields=AGG_FIELDS)
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# fair


def load_topology(spec: str) -> OverlayNetwork:
    """``toy1``/``toy2`` or a JSON file ``{"nodes": [[id, cap_in, cap_out], ...],
    "circuits": [[relay, ...], ...]}`` with capacities in KB/s."""
    if spec in ("toy", "toy1", "toy2"):
        net = build_toy_topology(1 if spec == "toy1" else 2)
        return network_from_lists([(n.id, cells_to_kbps(n.cap_in), cells_to_kbps(n.cap_out)) for n in net.nodes],
                                  [c.path for c in net.circuits])
    try:
        data = json.loads(Path(spec).read_text())
        return network_from_lists([tuple(n) for n in data["nodes"]], data["circuits"])
    except (OSError, ValueError, KeyError, TypeError, TopologyError) as exc:
        raise ConfigError(f"bad topology {spec}: {exc}") from None


def cmd_fair(args) -> int:
    net = load_topology(args.topology)
    try:
        qp = maxmin_qp(net, r_max=args.r_max)
    except FairnessError as exc:
        raise ConfigError(str(exc)) from None
    wf = maxmin_waterfill(net)
    lines = ["circuit_id,maxmin_qp,maxmin_waterfill,abs_diff"]
    worst = 0.0
    for c in net.circuits:
        a, b = qp.rates[c.id], wf.rates[c.id]
        worst = max(worst, abs(a - b))
        lines.append(f"{c.id},{a:.6f},{b:.6f},{abs(a - b):.3e}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"max discrepancy {worst:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="overlaycc", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    pr = sub.add_parser("run", help="run one scenario (reps > 1 runs consecutive seeds)")
    _add_flags(pr)
    pr.set_defaults(func=cmd_run)
    ps = sub.add_parser("sweep", help="sweep one parameter and aggregate over repetitions")
    ps.add_argument("spec", help="sweep file")
    _add_flags(ps)
    ps.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    ps.set_defaults(func=cmd_sweep)
    pf = sub.add_parser("fair", help="max-min fair rates from both fairness engines")
    pf.add_argument("topology", help="toy1, toy2 or a JSON topology file")
    pf.add_argument("--r-max", dest="r_max", type=float)
    pf.add_argument("--out")
    pf.set_defaults(func=cmd_fair)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

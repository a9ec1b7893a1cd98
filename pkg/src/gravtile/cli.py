"""Command-line front end: ``gravtile run|validate|bench|scale``.

Exit codes: 0 success, 2 configuration error, 3 validation tolerance
failure, 4 runtime/backend error. Failures print one JSON error record on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import bench, hermite, topology
from .core import GravtileError, atomic_write_text, write_snapshot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

ACC_TOLERANCE = 5.0e-4
JERK_TOLERANCE = 2.0e-3
ENERGY_HIST_TOLERANCE = 0.02


class ConfigError(GravtileError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ClusterSection:
    cards: int = 1
    chips_per_card: int | None = None
    mode: str = "multi-host-single-chip"
    core_count: int = 64
    workers: int | None = None
    executor: str = "thread"
    file: str | None = None


@dataclass
class BenchSection:
    repetitions: int = 3
    idle_watts: float = 20.0
    active_watts: float = 80.0
    sleep_seconds: float = 2.0
    traces: list = field(default_factory=list)
    window: list | None = None
    ranks: list = field(default_factory=lambda: [1, 2, 4])


@dataclass
class RunConfig:
    particles: int = 4096
    steps: int = 3
    dt: float = 0.01
    seed: int = 0
    ic_model: str = "uniform-sphere"
    order: str = "hermite4"
    backend: str = "device"
    softening: float = 1.0e-7
    grav_const: float = 1.0
    bins: int = 32
    output: str = "gravtile-out"
    emit: str = "table"
    cluster: ClusterSection = field(default_factory=ClusterSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"cluster": ClusterSection, "bench": BenchSection}


def _coerce(key: str, value, default):
    """Convert ``value`` to the type of ``default``; None passes for optional fields."""
    if value is None:
        return None
    target = type(default) if default is not None else None
    if key.endswith(("workers", "chips_per_card")):
        target = int
    elif key.endswith("file"):
        target = str
    elif key.endswith("window"):
        target = list
    if target is bool or isinstance(value, bool):
        raise ConfigError(key, f"expected {getattr(target, '__name__', 'value')}, got {value!r}")
    try:
        if target is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if target is float:
            return float(value)
        if target is str:
            if not isinstance(value, (str, int)):
                raise ValueError
            return str(value)
        if target is list:
            if not isinstance(value, (list, tuple)):
                raise ValueError
            return list(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {target.__name__}, got {value!r}") from None
    return value


def _apply(obj, raw: dict, prefix: str = "") -> None:
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "expected a mapping")
    names = {f.name: f for f in fields(obj)}
    for key, value in raw.items():
        full = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(full, "unknown key")
        if key in _SECTIONS and prefix == "":
            _apply(getattr(obj, key), value or {}, prefix=f"{key}.")
        else:
            setattr(obj, key, _coerce(full, value, getattr(obj, key)))


def _validate(cfg: RunConfig) -> None:
    if cfg.particles < 1:
        raise ConfigError("particles", "must be >= 1")
    if cfg.steps < 0:
        raise ConfigError("steps", "must be >= 0")
    if not cfg.dt > 0:
        raise ConfigError("dt", "must be positive")
    if cfg.softening < 0:
        raise ConfigError("softening", "must be >= 0")
    if not cfg.grav_const > 0:
        raise ConfigError("grav_const", "must be positive")
    if cfg.bins < 1:
        raise ConfigError("bins", "must be >= 1")
    if cfg.ic_model not in hermite.IC_MODELS:
        raise ConfigError("ic_model", f"must be one of {', '.join(hermite.IC_MODELS)}")
    try:
        hermite.Order.parse(cfg.order)
    except GravtileError:
        raise ConfigError("order", "must be hermite4 or hermite6") from None
    if cfg.backend not in ("device", "golden"):
        raise ConfigError("backend", "must be 'device' or 'golden'")
    if cfg.emit not in ("json", "table"):
        raise ConfigError("emit", "must be 'json' or 'table'")
    c = cfg.cluster
    if c.cards < 1:
        raise ConfigError("cluster.cards", "must be >= 1")
    if not 1 <= c.core_count <= 64:
        raise ConfigError("cluster.core_count", "must be in [1, 64]")
    if c.workers is not None and c.workers < 1:
        raise ConfigError("cluster.workers", "must be >= 1")
    if c.executor not in ("thread", "process"):
        raise ConfigError("cluster.executor", "must be 'thread' or 'process'")
    try:
        mode = topology.Mode.parse(c.mode)
    except GravtileError:
        raise ConfigError("cluster.mode", f"unknown mode {c.mode!r}") from None
    if c.chips_per_card is not None:
        if c.chips_per_card not in (1, 2):
            raise ConfigError("cluster.chips_per_card", "must be 1 or 2")
        if c.chips_per_card != mode.chips_per_rank:
            raise ConfigError("cluster.chips_per_card", f"{c.chips_per_card} conflicts with mode {mode.label}")
    c.mode = mode.label
    if c.file is not None and not Path(c.file).is_file():
        raise ConfigError("cluster.file", f"no such file {c.file!r}")
    b = cfg.bench
    if b.repetitions < 1:
        raise ConfigError("bench.repetitions", "must be >= 1")
    if b.idle_watts < 0 or b.active_watts < 0:
        raise ConfigError("bench.idle_watts", "power must be >= 0")
    if b.sleep_seconds < 0:
        raise ConfigError("bench.sleep_seconds", "must be >= 0")
    for p in b.traces:
        if not Path(p).is_file():
            raise ConfigError("bench.traces", f"no such file {p!r}")
    if b.window is not None and (len(b.window) != 2 or not b.window[0] < b.window[1]):
        raise ConfigError("bench.window", "must be [start, end] with start < end")
    if not b.ranks or any((not isinstance(r, int)) or r < 1 for r in b.ranks):
        raise ConfigError("bench.ranks", "must be a non-empty list of positive integers")


FLAG_KEYS = {
    "n": "particles",
    "steps": "steps",
    "dt": "dt",
    "seed": "seed",
    "backend": "backend",
    "out": "output",
    "emit": "emit",
    "order": "order",
    "ic_model": "ic_model",
    "mode": "cluster.mode",
    "cards": "cluster.cards",
    "chips_per_card": "cluster.chips_per_card",
    "cores": "cluster.core_count",
    "workers": "cluster.workers",
    "executor": "cluster.executor",
    "repetitions": "bench.repetitions",
    "trace": "bench.traces",
    "ranks": "bench.ranks",
}


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then flag ``overrides``.

    ``overrides`` uses dotted keys (``"cluster.cards"``) or plain top-level keys.
    """
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"invalid YAML: {exc}") from None
        if raw is not None:
            _apply(cfg, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            _apply(cfg, {section: {sub: value}})
        else:
            _apply(cfg, {key: value})
    _validate(cfg)
    return cfg


# --------------------------------------------------------------------------
# commands


def _cluster(cfg: RunConfig, cards: int | None = None):
    c = cfg.cluster
    if c.file:
        cluster, perf = topology.load_cluster(c.file)
        if cards is not None and cards != cluster.ranks:
            raw = topology.cluster_to_dict(cluster, perf)
            raw["cards"] = cards
            cluster, perf = topology.cluster_from_dict(raw)
        return cluster, perf
    cluster = topology.ClusterConfig.build(
        cards=cards if cards is not None else c.cards,
        mode=c.mode,
        core_count=c.core_count,
        workers=c.workers,
    )
    return cluster, topology.PerfParams(steps=cfg.steps)


def _initial(cfg: RunConfig):
    return hermite.generate_initial_conditions(
        cfg.particles, cfg.seed, cfg.ic_model, grav_const=cfg.grav_const, softening=cfg.softening
    )


def _backend(cfg: RunConfig, name: str | None = None, cards: int | None = None):
    name = name or cfg.backend
    if name == "golden":
        return hermite.GoldenOracle()
    cluster, _ = _cluster(cfg, cards)
    return hermite.SimDevice(cluster, executor=cfg.cluster.executor)


def _integrator(cfg: RunConfig, backend, steps: int | None = None) -> hermite.IntegratorConfig:
    return hermite.IntegratorConfig(
        dt=cfg.dt, steps=cfg.steps if steps is None else steps, order=cfg.order, backend=backend
    )


def _emit(cfg: RunConfig, payload: dict, table: str | None = None) -> None:
    out = sys.stdout
    if cfg.emit == "json" or table is None:
        out.write(json.dumps(payload, sort_keys=True) + "\n")
    else:
        out.write(table)


def cmd_run(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    system = _initial(cfg)
    write_snapshot(system, out / "snapshot_0000.txt")
    records = []
    if cfg.steps > 0:
        integ = _integrator(cfg, _backend(cfg))

        def on_step(rec, s):
            write_snapshot(s, out / f"snapshot_{rec['step']:04d}.txt")

        result = hermite.run(system, integ, callback=on_step)
        records = result.records
    atomic_write_text(out / "diagnostics.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    rep = hermite.energy_report(system, bins=cfg.bins)
    summary = {"command": "run", "steps": cfg.steps, "time": system.time, "energy": rep.to_dict()}
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    table = "step\ttime\twall_s\n" + "".join(f"{r['step']}\t{r['time']!r}\t{r['wall_s']:.6f}\n" for r in records)
    _emit(cfg, {"command": "run", "steps": cfg.steps, "records": records, "output": str(out)}, table)
    return EXIT_OK


def relative_component_deviation(test: np.ndarray, ref: np.ndarray) -> float:
    """max_i,k |test_ik - ref_ik| / |ref_i|: component error scaled by the reference vector length."""
    norm = np.linalg.norm(ref, axis=1)
    norm = np.where(norm > 0, norm, 1.0)
    return float(np.max(np.abs(test - ref) / norm[:, None])) if ref.size else 0.0


def elementwise_relative_deviation(test: np.ndarray, ref: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(test - ref) / np.abs(ref)
    r = r[np.isfinite(r)]
    return float(r.max()) if r.size else 0.0


def cmd_validate(cfg: RunConfig) -> int:
    system = _initial(cfg)
    device = _backend(cfg, "device")
    ga, gj = hermite.golden_acc_jerk(system)
    da, dj = device.evaluate(system)
    acc_dev = relative_component_deviation(da, ga)
    jerk_dev = relative_component_deviation(dj, gj)

    s_gold, s_dev = system.copy(), system.copy()
    hermite.run(s_gold, _integrator(cfg, hermite.GoldenOracle()))
    hermite.run(s_dev, _integrator(cfg, device))
    rep_gold = hermite.energy_report(s_gold, bins=cfg.bins)
    rep_dev = hermite.energy_report(s_dev, edges=rep_gold.edges)
    hist_dev, hist_ok = hermite.compare_energy_distribution(rep_dev, rep_gold, ENERGY_HIST_TOLERANCE)

    ok = acc_dev <= ACC_TOLERANCE and jerk_dev <= JERK_TOLERANCE and hist_ok
    payload = {
        "command": "validate",
        "particles": cfg.particles,
        "acc_max_rel_dev": acc_dev,
        "jerk_max_rel_dev": jerk_dev,
        "acc_elementwise_max_rel_dev": elementwise_relative_deviation(da, ga),
        "jerk_elementwise_max_rel_dev": elementwise_relative_deviation(dj, gj),
        "acc_tolerance": ACC_TOLERANCE,
        "jerk_tolerance": JERK_TOLERANCE,
        "energy_hist_max_rel_dev": hist_dev,
        "energy_hist_tolerance": ENERGY_HIST_TOLERANCE,
        "steps": cfg.steps,
        "passed": ok,
    }
    out = Path(cfg.output)
    atomic_write_text(out / "validate.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    edges = rep_gold.edges
    hist_rows = "".join(
        f"{edges[k]!r}\t{edges[k + 1]!r}\t{rep_gold.counts[k]}\t{rep_dev.counts[k]}\n" for k in range(len(edges) - 1)
    )
    atomic_write_text(out / "energy_hist.tsv", "lo\thi\tgolden\tdevice\n" + hist_rows)
    table = (
        f"acc max rel dev   {acc_dev:.3e}  (tol {ACC_TOLERANCE:g})  {'ok' if acc_dev <= ACC_TOLERANCE else 'FAIL'}\n"
        f"jerk max rel dev  {jerk_dev:.3e}  (tol {JERK_TOLERANCE:g})  {'ok' if jerk_dev <= JERK_TOLERANCE else 'FAIL'}\n"
        f"energy hist dev   {hist_dev:.3e}  (tol {ENERGY_HIST_TOLERANCE:g})  {'ok' if hist_ok else 'FAIL'}\n"
    )
    _emit(cfg, payload, table)
    return EXIT_OK if ok else EXIT_VALIDATION


def _timed_run(cfg: RunConfig, backend) -> float:
    system = _initial(cfg)
    integ = _integrator(cfg, backend)
    t0 = time.perf_counter()
    hermite.initialize(system, integ)
    hermite.run(system, integ)
    return time.perf_counter() - t0


def cmd_bench(cfg: RunConfig) -> int:
    b = cfg.bench
    out = Path(cfg.output)
    backend = _backend(cfg)
    devices = backend.cluster.active_devices if isinstance(backend, hermite.SimDevice) else 1
    label = f"{cfg.backend}:{cfg.cluster.mode}:{cfg.cluster.cards}card"
    model = bench.SyntheticPowerModel(b.idle_watts, b.active_watts, sleep_seconds=b.sleep_seconds)
    runs = []
    if b.traces:
        channels = [bench.read_channel(p) for p in b.traces]
        if b.window is not None:
            window = tuple(b.window)
        else:
            window = (max(c.extent[0] for c in channels), min(c.extent[1] for c in channels))
        trace = bench.EnergyTrace(channels, window)
        runs.append(bench.measure_trace(f"{label}:trace", trace))
    else:
        start = 0.0
        for _ in range(b.repetitions):
            elapsed = _timed_run(cfg, backend)
            trace = model.trace(elapsed, devices, start=start)
            runs.append(bench.measure_trace(label, trace, time_to_solution=elapsed))
            start = trace.window[1] + model.sleep_seconds
    report = bench.bench_report(runs)
    bench.write_report(report, out / "bench_report.json")
    atomic_write_text(out / "bench_runs.tsv", bench.runs_table(runs))
    _emit(cfg, {"command": "bench", **report.to_dict()}, bench.runs_table(runs))
    return EXIT_OK


def cmd_scale(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    measurements = []
    for k in cfg.bench.ranks:
        backend = _backend(cfg, "device", cards=k)
        for _ in range(cfg.bench.repetitions):
            measurements.append((k, _timed_run(cfg, backend)))
    rows = bench.scaling_report(measurements)
    table = bench.scaling_table(rows)
    atomic_write_text(out / "scaling.tsv", table)
    _emit(cfg, {"command": "scale", "rows": [asdict(r) for r in rows]}, table)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "bench": cmd_bench, "scale": cmd_scale}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gravtile", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--n", type=int, help="number of particles")
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--order", choices=["hermite4", "hermite6"])
    p.add_argument("--ic-model", dest="ic_model")
    p.add_argument("--mode", help="1|2|3 or multi-host-single-chip|multi-host-multi-chip|mesh-sharded")
    p.add_argument("--cards", type=int)
    p.add_argument("--chips-per-card", dest="chips_per_card", type=int)
    p.add_argument("--cores", type=int, help="simulated cores per chip (1-64)")
    p.add_argument("--workers", type=int, help="host threads per chip")
    p.add_argument("--executor", choices=["thread", "process"], help="how ranks run")
    p.add_argument("--backend", choices=["device", "golden"])
    p.add_argument("--repetitions", type=int)
    p.add_argument("--trace", action="append", help="power/energy trace file (repeatable)")
    p.add_argument("--ranks", type=lambda s: [int(x) for x in s.split(",")], help="comma-separated rank counts")
    p.add_argument("--out", help="output directory")
    p.add_argument("--emit", choices=["json", "table"])
    return p


def _error(kind: str, message: str, code: int, key: str | None = None) -> int:
    rec = {"error": kind, "message": message, "exit_code": code}
    if key is not None:
        rec["key"] = key
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_CONFIG, exc.key)
    except GravtileError as exc:
        return _error("config", str(exc), EXIT_CONFIG)
    effective = cfg.to_dict()
    sys.stdout.write("# effective config: " + json.dumps(effective, sort_keys=True) + "\n")
    try:
        atomic_write_text(Path(cfg.output) / "config.effective.yaml", yaml.safe_dump(effective, sort_keys=True))
        return COMMANDS[args.command](cfg)
    except GravtileError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_RUNTIME)
    except OSError as exc:
        return _error("OSError", str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())

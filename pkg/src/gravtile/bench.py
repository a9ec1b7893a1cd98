"""Time, energy and EDP accounting for simulation runs.

Power traces are sampled series per device channel, either instantaneous
power in watts or cumulative energy in joules. Energy-to-solution integrates
power with the trapezoidal rule over the samples that fall inside the active
window, so samples taken during sleep periods never contribute. All channels
are assumed to share one clock.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import GravtileError, atomic_write_text

POWER = "power"
ENERGY = "energy"
UNITS = {POWER: "W", ENERGY: "J"}

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class BenchError(GravtileError):
    pass


@dataclass
class Channel:
    name: str
    kind: str
    t: np.ndarray
    values: np.ndarray
    # extent over which the first/last value may be held constant; set for
    # power series derived from energy counters, whose samples sit on
    # interval midpoints
    support: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in UNITS:
            raise BenchError(f"channel {self.name}: kind must be 'power' or 'energy', got {self.kind!r}")
        self.t = np.asarray(self.t, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.t.shape != self.values.shape or self.t.ndim != 1:
            raise BenchError(f"channel {self.name}: timestamps and values must be 1-D and equal length")
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise BenchError(f"channel {self.name}: timestamps must be strictly increasing")

    @property
    def unit(self) -> str:
        return UNITS[self.kind]

    @property
    def extent(self) -> tuple[float, float]:
        if self.support is not None:
            return self.support
        return float(self.t[0]), float(self.t[-1])


@dataclass
class EnergyTrace:
    channels: list[Channel]
    window: tuple[float, float]

    def __post_init__(self):
        a, b = self.window
        if not a < b:
            raise BenchError(f"window start {a} must precede end {b}")
        for ch in self.channels:
            lo, hi = ch.extent
            if a < lo or b > hi:
                raise BenchError(f"window {self.window} outside the extent of channel {ch.name}")

    @property
    def duration(self) -> float:
        return self.window[1] - self.window[0]

    def power_channels(self) -> list[Channel]:
        return [ch if ch.kind == POWER else energy_channel_to_power(ch) for ch in self.channels]


def integrate_power(channel: Channel, window: tuple[float, float]) -> float:
    """Joules drawn by ``channel`` during ``window``.

    Trapezoidal rule over the samples with ``window[0] <= t <= window[1]``.
    For derived channels with a ``support``, the first and last values are
    also held out to the window edges (clipped to the support).
    """
    if channel.kind != POWER:
        raise BenchError(f"channel {channel.name} holds {channel.kind}, not power")
    a, b = window
    mask = (channel.t >= a) & (channel.t <= b)
    t = channel.t[mask]
    p = channel.values[mask]
    if channel.support is not None and t.size >= 1:
        lo = max(a, channel.support[0])
        hi = min(b, channel.support[1])
        head = p[0] * max(0.0, t[0] - lo)
        tail = p[-1] * max(0.0, hi - t[-1])
        body = float(_trapezoid(p, t)) if t.size >= 2 else 0.0
        return head + body + tail
    if t.size < 2:
        raise BenchError(f"channel {channel.name}: fewer than 2 samples inside window {window}")
    return float(_trapezoid(p, t))


def energy_channel_to_power(channel: Channel) -> Channel:
    """Forward-difference power of a cumulative energy counter.

    Power sits on interval midpoints; the result keeps the counter's extent
    as its support, so integrating it back over that extent recovers the
    counter's increment exactly on a uniform sampling grid.
    """
    if channel.kind != ENERGY:
        raise BenchError(f"channel {channel.name} is not an energy counter")
    if channel.t.size < 2:
        raise BenchError(f"channel {channel.name}: need at least 2 samples")
    de = np.diff(channel.values)
    if np.any(de < 0):
        raise BenchError(f"channel {channel.name}: cumulative energy decreases")
    dt = np.diff(channel.t)
    mid = channel.t[:-1] + dt / 2
    return Channel(channel.name, POWER, mid, de / dt, support=(float(channel.t[0]), float(channel.t[-1])))


def integrate_energy_counter(channel: Channel, window: tuple[float, float]) -> float:
    """Increment of a cumulative counter between the first and last in-window samples."""
    if channel.kind != ENERGY:
        raise BenchError(f"channel {channel.name} is not an energy counter")
    a, b = window
    mask = (channel.t >= a) & (channel.t <= b)
    e = channel.values[mask]
    if e.size < 2:
        raise BenchError(f"channel {channel.name}: fewer than 2 samples inside window {window}")
    return float(e[-1] - e[0])


@dataclass
class PowerSeries:
    t: np.ndarray
    watts: np.ndarray
    peak: float
    clamped: list[str] = field(default_factory=list)


def total_power(channels: list[Channel], window: tuple[float, float] | None = None) -> PowerSeries:
    """Sum power channels on the union of their timestamps.

    Each channel is linearly interpolated onto the union grid. Where the grid
    runs past a channel's samples the nearest value is held and the channel
    name is listed in ``clamped``.
    """
    if not channels:
        raise BenchError("total_power needs at least one channel")
    for ch in channels:
        if ch.kind != POWER:
            raise BenchError(f"channel {ch.name} is not a power channel")
    grid = np.unique(np.concatenate([ch.t for ch in channels]))
    if window is not None:
        grid = grid[(grid >= window[0]) & (grid <= window[1])]
        if grid.size == 0:
            raise BenchError(f"no samples inside window {window}")
    total = np.zeros_like(grid)
    clamped = []
    for ch in channels:
        if grid[0] < ch.t[0] or grid[-1] > ch.t[-1]:
            clamped.append(ch.name)
        total += np.interp(grid, ch.t, ch.values)
    return PowerSeries(grid, total, float(total.max()), clamped)


def trace_energy(trace: EnergyTrace) -> float:
    total = 0.0
    for ch in trace.channels:
        if ch.kind == POWER:
            total += integrate_power(ch, trace.window)
        else:
            total += integrate_energy_counter(ch, trace.window)
    return total


# --------------------------------------------------------------------------
# synthetic traces


@dataclass
class SyntheticPowerModel:
    """Idle draw plus a fixed active draw per busy device, sampled at 1 Hz."""

    idle_watts: float = 20.0
    active_watts: float = 80.0
    sample_period: float = 1.0
    sleep_seconds: float = 5.0

    def trace(self, duration: float, devices: int = 1, start: float = 0.0) -> EnergyTrace:
        """One power channel per device; active window after ``sleep_seconds``."""
        if duration <= 0:
            raise BenchError("duration must be positive")
        a = start + self.sleep_seconds
        b = a + duration
        end = b + self.sleep_seconds
        n = int(math.floor((end - start) / self.sample_period + 1e-9)) + 1
        t = start + self.sample_period * np.arange(n)
        t = np.union1d(t, [a, b])
        busy = (t >= a) & (t <= b)
        watts = np.where(busy, self.idle_watts + self.active_watts, self.idle_watts)
        channels = [Channel(f"dev{d}", POWER, t, watts) for d in range(devices)]
        return EnergyTrace(channels, (a, b))


# --------------------------------------------------------------------------
# reports


@dataclass
class RunMeasurement:
    label: str
    time_to_solution: float
    energy_to_solution: float
    peak_power: float

    @property
    def edp(self) -> float:
        return self.energy_to_solution * self.time_to_solution


def measure_trace(label: str, trace: EnergyTrace, time_to_solution: float | None = None) -> RunMeasurement:
    energy = trace_energy(trace)
    peak = total_power(trace.power_channels(), trace.window).peak
    tts = trace.duration if time_to_solution is None else time_to_solution
    return RunMeasurement(label, tts, energy, peak)


def _stats(xs: list[float]) -> dict:
    return {
        "mean": statistics.fmean(xs),
        "std": statistics.stdev(xs) if len(xs) > 1 else 0.0,
        "n": len(xs),
    }


@dataclass
class BenchReport:
    time_to_solution: float
    energy_to_solution: float
    edp: float
    peak_power: float
    per_config: dict
    runs: list[RunMeasurement]

    def to_dict(self) -> dict:
        return {
            "time_to_solution": self.time_to_solution,
            "energy_to_solution": self.energy_to_solution,
            "edp": self.edp,
            "peak_power": self.peak_power,
            "per_config": self.per_config,
            "runs": [asdict(r) | {"edp": r.edp} for r in self.runs],
        }


def bench_report(runs: list[RunMeasurement]) -> BenchReport:
    """Aggregate repeated runs; top-level figures are means over all runs."""
    if not runs:
        raise BenchError("bench_report needs at least one run")
    per_config = {}
    for label in dict.fromkeys(r.label for r in runs):
        rs = [r for r in runs if r.label == label]
        per_config[label] = {
            "time_to_solution": _stats([r.time_to_solution for r in rs]),
            "energy_to_solution": _stats([r.energy_to_solution for r in rs]),
            "edp": _stats([r.edp for r in rs]),
            "peak_power": max(r.peak_power for r in rs),
        }
    tts = statistics.fmean(r.time_to_solution for r in runs)
    ets = statistics.fmean(r.energy_to_solution for r in runs)
    return BenchReport(
        time_to_solution=tts,
        energy_to_solution=ets,
        edp=ets * tts,
        peak_power=max(r.peak_power for r in runs),
        per_config=per_config,
        runs=list(runs),
    )


@dataclass
class ScalingRow:
    ranks: int
    time: float
    speedup: float
    efficiency: float


def scaling_report(runs) -> list[ScalingRow]:
    """Strong-scaling table from ``(ranks, seconds)`` pairs; repeats are averaged."""
    times: dict[int, list[float]] = {}
    for ranks, t in runs:
        if ranks < 1 or not t > 0:
            raise BenchError(f"invalid run ({ranks}, {t})")
        times.setdefault(int(ranks), []).append(float(t))
    if 1 not in times:
        raise BenchError("scaling report needs a ranks=1 baseline")
    base = statistics.fmean(times[1])
    rows = []
    for k in sorted(times):
        t = statistics.fmean(times[k])
        s = base / t
        rows.append(ScalingRow(k, t, s, s / k))
    return rows


# --------------------------------------------------------------------------
# files


def read_channel(path) -> Channel:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        rows = [line.split() for line in fh if line.strip() and not line.startswith("#")]
    if not header.startswith("#"):
        raise BenchError(f"{path}: missing '# channel=... kind=... unit=...' header")
    meta = dict(f.split("=", 1) for f in header.lstrip("#").split() if "=" in f)
    try:
        name, kind, unit = meta["channel"], meta["kind"], meta["unit"]
    except KeyError as exc:
        raise BenchError(f"{path}: header lacks {exc.args[0]!r}") from None
    if kind not in UNITS or UNITS[kind] != unit:
        raise BenchError(f"{path}: inconsistent kind/unit {kind!r}/{unit!r}")
    data = np.array([[float(x) for x in r[:2]] for r in rows]) if rows else np.zeros((0, 2))
    return Channel(name, kind, data[:, 0], data[:, 1])


def write_channel(channel: Channel, path) -> None:
    lines = [f"# channel={channel.name} kind={channel.kind} unit={channel.unit}\n"]
    lines += [f"{t:.17g} {v:.17g}\n" for t, v in zip(channel.t, channel.values)]
    atomic_write_text(path, "".join(lines))


def write_report(report: BenchReport, path) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def runs_table(runs: list[RunMeasurement]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["label", "time_to_solution_s", "energy_to_solution_j", "edp_js", "peak_power_w"])
    for r in runs:
        w.writerow([r.label, repr(r.time_to_solution), repr(r.energy_to_solution), repr(r.edp), repr(r.peak_power)])
    return buf.getvalue()


def scaling_table(rows: list[ScalingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["ranks", "time_s", "speedup", "efficiency"])
    for r in rows:
        w.writerow([r.ranks, repr(r.time), repr(r.speedup), repr(r.efficiency)])
    return buf.getvalue()

"""Hermite predictor-corrector integration on the host (float64).

The default scheme is fourth order: each step predicts positions and
velocities with a Taylor expansion, evaluates acceleration and jerk at the
predicted state (golden oracle or simulated device), and applies the
two-point Hermite corrector. ``Order.HERMITE6`` additionally uses snap from
the oracle and a crackle estimate from the previous step.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import HOST_DTYPE, GravtileError, ParticleSystem

GOLDEN_CHUNK = 2048


class Order(enum.Enum):
    HERMITE4 = "hermite4"
    HERMITE6 = "hermite6"

    @classmethod
    def parse(cls, value) -> "Order":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for member in cls:
            if member.value == key or str(member.value[-1]) == key:
                return member
        raise GravtileError(f"unknown integrator order {value!r}")


class IntegrationError(GravtileError):
    pass


# --------------------------------------------------------------------------
# golden oracle


def _check_coincident(system: ParticleSystem) -> None:
    if system.softening > 0 or system.n < 2:
        return
    order = np.lexsort(system.pos.T)
    p = system.pos[order]
    if np.any(np.all(p[1:] == p[:-1], axis=1)):
        raise IntegrationError("coincident particles with zero softening")


def golden_acc_jerk(system: ParticleSystem) -> tuple[np.ndarray, np.ndarray]:
    """Serial brute-force acceleration and jerk in float64.

    For every i the sum over j runs in ascending j, skipping j == i.
    """
    _check_coincident(system)
    n = system.n
    pos, vel = system.pos, system.vel
    gm = system.grav_const * system.mass
    eps2 = system.softening ** 2
    acc = np.zeros((n, 3), dtype=HOST_DTYPE)
    jerk = np.zeros((n, 3), dtype=HOST_DTYPE)
    for j in range(n):
        dr = pos[j] - pos
        dv = vel[j] - vel
        r2 = np.einsum("ij,ij->i", dr, dr) + eps2
        r2[j] = 1.0
        inv_r2 = 1.0 / r2
        inv_r3 = inv_r2 / np.sqrt(r2)
        rv = np.einsum("ij,ij->i", dr, dv)
        t = gm[j] * inv_r3
        t[j] = 0.0
        acc += t[:, None] * dr
        jerk += t[:, None] * (dv - (3.0 * rv * inv_r2)[:, None] * dr)
    return acc, jerk


def golden_snap(system: ParticleSystem, acc: np.ndarray) -> np.ndarray:
    """Analytic snap given the accelerations ``acc`` at the same state."""
    n = system.n
    pos, vel = system.pos, system.vel
    gm = system.grav_const * system.mass
    eps2 = system.softening ** 2
    snap = np.zeros((n, 3), dtype=HOST_DTYPE)
    for j in range(n):
        dr = pos[j] - pos
        dv = vel[j] - vel
        da = acc[j] - acc
        r2 = np.einsum("ij,ij->i", dr, dr) + eps2
        r2[j] = 1.0
        inv_r2 = 1.0 / r2
        inv_r3 = inv_r2 / np.sqrt(r2)
        alpha = np.einsum("ij,ij->i", dr, dv) * inv_r2
        beta = (np.einsum("ij,ij->i", dv, dv) + np.einsum("ij,ij->i", dr, da)) * inv_r2 + alpha * alpha
        t = gm[j] * inv_r3
        t[j] = 0.0
        a_ij = t[:, None] * dr
        j_ij = t[:, None] * dv - 3.0 * alpha[:, None] * a_ij
        snap += t[:, None] * da - 6.0 * alpha[:, None] * j_ij - 3.0 * beta[:, None] * a_ij
    return snap


def potential_per_particle(system: ParticleSystem) -> np.ndarray:
    """phi_i = -sum_{j != i} G m_j / sqrt(r_ij^2 + eps^2)."""
    n = system.n
    pos = system.pos
    gm = system.grav_const * system.mass
    eps2 = system.softening ** 2
    phi = np.zeros(n, dtype=HOST_DTYPE)
    idx = np.arange(n)
    for lo in range(0, n, GOLDEN_CHUNK):
        hi = min(lo + GOLDEN_CHUNK, n)
        dr = pos[None, :, :] - pos[lo:hi, None, :]
        r2 = np.einsum("ijk,ijk->ij", dr, dr) + eps2
        self_pair = idx[lo:hi, None] == idx[None, :]
        r2[self_pair] = 1.0
        inv_r = 1.0 / np.sqrt(r2)
        inv_r[self_pair] = 0.0
        phi[lo:hi] = -(inv_r @ gm)
    return phi


# --------------------------------------------------------------------------
# backends


class GoldenOracle:
    name = "golden"
    supports_snap = True

    def evaluate(self, system: ParticleSystem) -> tuple[np.ndarray, np.ndarray]:
        return golden_acc_jerk(system)

    def snap(self, system: ParticleSystem, acc: np.ndarray) -> np.ndarray:
        return golden_snap(system, acc)


class SimDevice:
    """Evaluate on a simulated cluster (see :mod:`gravtile.topology`)."""

    name = "device"
    supports_snap = False

    def __init__(self, cluster=None, executor: str = "thread"):
        from .topology import ClusterConfig

        self.cluster = cluster if cluster is not None else ClusterConfig.build()
        self.executor = executor

    def evaluate(self, system: ParticleSystem) -> tuple[np.ndarray, np.ndarray]:
        from .topology import execute_evaluation

        return execute_evaluation(self.cluster, system, executor=self.executor)


def make_backend(name, cluster=None, executor: str = "thread"):
    if not isinstance(name, str):
        return name
    key = name.lower()
    if key in ("golden", "oracle", "goldenoracle"):
        return GoldenOracle()
    if key in ("device", "simdevice", "sim"):
        return SimDevice(cluster, executor=executor)
    raise GravtileError(f"unknown backend {name!r}")


# --------------------------------------------------------------------------
# integrator


@dataclass
class IntegratorConfig:
    dt: float = 0.01
    steps: int = 0
    order: Order = Order.HERMITE4
    backend: object = field(default_factory=GoldenOracle)
    energy_diagnostics: bool = False

    def __post_init__(self):
        self.order = Order.parse(self.order)
        self.backend = make_backend(self.backend)
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise IntegrationError(f"dt must be positive, got {self.dt!r}")
        if self.steps < 0:
            raise IntegrationError(f"steps must be >= 0, got {self.steps!r}")
        if self.order is Order.HERMITE6 and not getattr(self.backend, "supports_snap", False):
            raise IntegrationError("hermite6 needs snap, which only the golden oracle provides")


def predict(system: ParticleSystem, dt: float, order: Order = Order.HERMITE4) -> tuple[np.ndarray, np.ndarray]:
    """Predicted (pos, vel) at ``time + dt``; ``system`` is not modified."""
    x, v, a, j = system.pos, system.vel, system.acc, system.jerk
    dt2 = dt * dt
    dt3 = dt2 * dt
    pos = x + v * dt + a * (dt2 / 2) + j * (dt3 / 6)
    vel = v + a * dt + j * (dt2 / 2)
    if order is Order.HERMITE6:
        s, c = system.snap, system.crackle
        dt4 = dt3 * dt
        pos = pos + s * (dt4 / 24) + c * (dt4 * dt / 120)
        vel = vel + s * (dt3 / 6) + c * (dt4 / 24)
    return pos, vel


def correct(system: ParticleSystem, dt: float, acc_new: np.ndarray, jerk_new: np.ndarray,
            snap_new: np.ndarray | None = None, order: Order = Order.HERMITE4) -> None:
    """Apply the two-point Hermite corrector in place and rotate history."""
    x0, v0 = system.pos, system.vel
    a0, j0 = system.acc, system.jerk
    a1, j1 = acc_new, jerk_new
    dt2 = dt * dt
    if order is Order.HERMITE6:
        if snap_new is None:
            raise IntegrationError("hermite6 corrector needs snap")
        s0, s1 = system.snap, snap_new
        dt3 = dt2 * dt
        v1 = v0 + (dt / 2) * (a0 + a1) - (dt2 / 10) * (j1 - j0) + (dt3 / 120) * (s0 + s1)
        x1 = x0 + (dt / 2) * (v0 + v1) - (dt2 / 10) * (a1 - a0) + (dt3 / 120) * (j0 + j1)
        if dt > 0:
            # crackle at the end of the step from the quintic through both endpoints
            system.crackle = (60 * (a1 - a0) / dt3 - (24 * j0 + 36 * j1) / dt2 + (9 * s1 - 3 * s0) / dt)
        system.snap = np.array(s1, dtype=HOST_DTYPE)
    else:
        v1 = v0 + (dt / 2) * (a0 + a1) - (dt2 / 12) * (j1 - j0)
        x1 = x0 + (dt / 2) * (v0 + v1) - (dt2 / 12) * (a1 - a0)
    system.acc_prev, system.jerk_prev = a0, j0
    system.pos, system.vel = x1, v1
    system.acc = np.array(a1, dtype=HOST_DTYPE)
    system.jerk = np.array(j1, dtype=HOST_DTYPE)
    system.time += dt


def _predicted_system(system: ParticleSystem, pos, vel) -> ParticleSystem:
    return ParticleSystem(mass=system.mass, pos=pos, vel=vel, time=system.time,
                          grav_const=system.grav_const, softening=system.softening)


def initialize(system: ParticleSystem, config: IntegratorConfig) -> None:
    """Evaluate derivatives at the current state if not already present."""
    if system.has_derivatives:
        return
    acc, jerk = config.backend.evaluate(system)
    system.acc = np.array(acc, dtype=HOST_DTYPE)
    system.jerk = np.array(jerk, dtype=HOST_DTYPE)
    if config.order is Order.HERMITE6:
        system.snap = config.backend.snap(system, system.acc)
        system.crackle = np.zeros_like(system.snap)
    system.has_derivatives = True


def step(system: ParticleSystem, config: IntegratorConfig) -> dict:
    """One predict -> evaluate -> correct cycle. Returns timing in seconds."""
    initialize(system, config)
    dt = config.dt
    t0 = time.perf_counter()
    pos_p, vel_p = predict(system, dt, config.order)
    predicted = _predicted_system(system, pos_p, vel_p)
    t1 = time.perf_counter()
    acc, jerk = config.backend.evaluate(predicted)
    snap = config.backend.snap(predicted, acc) if config.order is Order.HERMITE6 else None
    t2 = time.perf_counter()
    correct(system, dt, acc, jerk, snap, config.order)
    t3 = time.perf_counter()
    system.validate()
    return {"predict_s": t1 - t0, "evaluate_s": t2 - t1, "correct_s": t3 - t2}


@dataclass
class RunResult:
    system: ParticleSystem
    records: list[dict]

    @property
    def wall_seconds(self) -> float:
        return sum(r["wall_s"] for r in self.records)


def run(system: ParticleSystem, config: IntegratorConfig, callback=None) -> RunResult:
    """Advance ``system`` in place by ``config.steps`` steps."""
    records = []
    for k in range(config.steps):
        t0 = time.perf_counter()
        try:
            timing = step(system, config)
        except GravtileError as exc:
            raise IntegrationError(f"step {k}: {exc}") from exc
        rec = {"step": k + 1, "time": system.time, "wall_s": time.perf_counter() - t0, **timing}
        p = system.momentum()
        rec["momentum"] = p.tolist()
        if config.energy_diagnostics:
            rep = energy_report(system)
            rec.update(kinetic=rep.kinetic, potential=rep.potential, total=rep.total)
        records.append(rec)
        if callback is not None:
            callback(rec, system)
    return RunResult(system, records)


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class EnergyReport:
    """Energies of a snapshot.

    ``per_particle`` is the specific energy ``v_i^2/2 + phi_i/2``: each pair
    potential is split evenly between its two particles, so that
    ``sum(m_i * e_i) == kinetic + potential``.
    """

    kinetic: float
    potential: float
    per_particle: np.ndarray
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> float:
        return self.kinetic + self.potential

    def virial_ratio(self) -> float:
        return abs(2 * self.kinetic / self.potential) if self.potential else math.inf

    def to_dict(self) -> dict:
        return {
            "kinetic": self.kinetic,
            "potential": self.potential,
            "total": self.total,
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
        }


def histogram(values: np.ndarray, bins=32, edges=None) -> tuple[np.ndarray, np.ndarray]:
    """Counts over ``edges`` (or ``bins`` equal bins); outliers go to the end bins."""
    if edges is None:
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, int(bins) + 1)
    edges = np.asarray(edges, dtype=HOST_DTYPE)
    clipped = np.clip(values, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return edges, counts


def energy_report(system: ParticleSystem, bins=32, edges=None) -> EnergyReport:
    phi = potential_per_particle(system)
    v2 = np.einsum("ij,ij->i", system.vel, system.vel)
    kinetic = 0.5 * float(np.dot(system.mass, v2))
    potential = 0.5 * float(np.dot(system.mass, phi))
    e = 0.5 * v2 + 0.5 * phi
    edges, counts = histogram(e, bins, edges)
    return EnergyReport(kinetic, potential, e, edges, counts)


def compare_energy_distribution(report_a: EnergyReport, report_b: EnergyReport,
                                threshold: float = 0.02) -> tuple[float, bool]:
    """Max over bins of ``|c_a - c_b| / max(1, c_b)`` and whether it is within ``threshold``."""
    if report_a.edges.shape != report_b.edges.shape or not np.array_equal(report_a.edges, report_b.edges):
        raise GravtileError("energy histograms use different bin edges")
    ca = report_a.counts.astype(HOST_DTYPE)
    cb = report_b.counts.astype(HOST_DTYPE)
    dev = float(np.max(np.abs(ca - cb) / np.maximum(1.0, cb))) if ca.size else 0.0
    return dev, dev <= threshold


# --------------------------------------------------------------------------
# initial conditions

IC_MODELS = ("uniform-sphere", "cold-uniform")


def generate_initial_conditions(n: int, seed: int = 0, model: str = "uniform-sphere",
                                grav_const: float = 1.0, softening: float = 1.0e-7) -> ParticleSystem:
    """Equal-mass particles uniform in the unit ball, total mass 1.

    ``uniform-sphere`` draws isotropic Gaussian velocities with per-component
    variance ``G/5``, which puts a uniform sphere of unit mass and radius in
    virial equilibrium (``2K = |W| = 3G/5``). ``cold-uniform`` starts at rest.
    Centre-of-mass position and velocity are removed.
    """
    if n < 1:
        raise GravtileError(f"n must be >= 1, got {n}")
    if model not in IC_MODELS:
        raise GravtileError(f"unknown initial-condition model {model!r}; choose from {IC_MODELS}")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    radius = rng.random(n) ** (1.0 / 3.0)
    pos = direction * radius[:, None]
    mass = np.full(n, 1.0 / n)
    if model == "uniform-sphere":
        vel = rng.standard_normal((n, 3)) * math.sqrt(grav_const / 5.0)
    else:
        vel = np.zeros((n, 3))
    total = mass.sum()
    pos -= (mass[:, None] * pos).sum(axis=0) / total
    vel -= (mass[:, None] * vel).sum(axis=0) / total
    return ParticleSystem(mass=mass, pos=pos, vel=vel, grav_const=grav_const, softening=softening)


def circular_binary(separation: float = 1.0, total_mass: float = 1.0, grav_const: float = 1.0,
                    softening: float = 0.0) -> ParticleSystem:
    """Two equal masses on a circular orbit in the xy-plane.

    The period is ``2*pi*sqrt(separation**3 / (G * total_mass))``.
    """
    m = total_mass / 2
    v_rel = math.sqrt(grav_const * total_mass / separation)
    half = separation / 2
    return ParticleSystem(
        mass=[m, m],
        pos=[[-half, 0.0, 0.0], [half, 0.0, 0.0]],
        vel=[[0.0, -v_rel / 2, 0.0], [0.0, v_rel / 2, 0.0]],
        grav_const=grav_const,
        softening=softening,
    )


def orbital_period(separation: float = 1.0, total_mass: float = 1.0, grav_const: float = 1.0) -> float:
    return 2 * math.pi * math.sqrt(separation ** 3 / (grav_const * total_mass))

"""The read / compute / write force pipeline of one simulated core.

Layout: every *source* tile packs 1024 distinct particles (one tile per
attribute: rx, ry, rz, vx, vy, vz). The *target* stream visits every
particle j of the full system as 7 tiles holding 1024 copies of the same
scalar (rx, ry, rz, vx, vy, vz, weight). Each (source tile, target j) pair
updates six accumulator tiles: acceleration and jerk.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEVICE_DTYPE,
    HOST_DTYPE,
    TILE_COLS,
    TILE_LANES,
    TILE_ROWS,
    GravtileError,
    ParticleSystem,
    Tile,
    broadcast_scalar,
    pack_column_tile,
)
from .tile_engine import CircularBuffer, DstRegisterFile, PipelineAborted

SRC_ATTRS = ("rx", "ry", "rz", "vx", "vy", "vz")
TGT_ATTRS = SRC_ATTRS + ("pw",)
OUT_ATTRS = ("ax", "ay", "az", "jx", "jy", "jz")
N_SRC = len(SRC_ATTRS)
N_TGT = len(TGT_ATTRS)
N_OUT = len(OUT_ATTRS)

PAD_POSITION = 1.0e6
DEFAULT_SOFTENING = 1.0e-7
CB_DEPTH = 2


class KernelError(GravtileError):
    pass


def softening_sq32(softening: float) -> np.float32:
    eps2 = DEVICE_DTYPE(softening * softening)
    if not eps2 > 0:
        raise KernelError(f"softening {softening!r} gives a non-positive float32 eps^2")
    return eps2


@dataclass
class TiledWorkload:
    """Tilized particle data for one force program.

    ``targets`` is the compact form of the replicated stream: one row per
    target particle with (rx, ry, rz, vx, vy, vz, G*m). :meth:`target_tiles`
    expands a row into its 7 broadcast tiles on demand.
    """

    source_tiles: list[tuple[Tile, ...]]
    source_mass: list[Tile]
    targets: np.ndarray
    softening_sq: np.float32
    n_sources: int
    core_range: range = None

    def __post_init__(self):
        if self.core_range is None:
            self.core_range = range(len(self.source_tiles))
        if not self.softening_sq > 0:
            raise KernelError("softening_sq must be positive")

    @property
    def n_source_tiles(self) -> int:
        return len(self.source_tiles)

    @property
    def n_targets(self) -> int:
        return self.targets.shape[0]

    def target_tiles(self, j: int) -> list[Tile]:
        return [broadcast_scalar(x) for x in self.targets[j].tolist()]

    def for_cores(self, core_range: range) -> "TiledWorkload":
        return TiledWorkload(
            source_tiles=self.source_tiles,
            source_mass=self.source_mass,
            targets=self.targets,
            softening_sq=self.softening_sq,
            n_sources=self.n_sources,
            core_range=core_range,
        )


def target_rows(system: ParticleSystem) -> np.ndarray:
    weight = system.grav_const * system.mass
    return np.column_stack([system.pos, system.vel, weight]).astype(HOST_DTYPE)


def tilize(system: ParticleSystem, targets: ParticleSystem | None = None) -> TiledWorkload:
    """Pack ``system`` into source tiles; stream ``targets`` (default: itself).

    The last source tile is padded with zero-mass lanes parked at
    ``PAD_POSITION`` with zero velocity.
    """
    if targets is None:
        targets = system
    n = system.n
    n_tiles = -(-n // TILE_LANES)
    padded = n_tiles * TILE_LANES
    cols = np.zeros((padded, N_SRC), dtype=HOST_DTYPE)
    cols[:n, 0:3] = system.pos
    cols[:n, 3:6] = system.vel
    cols[n:, 0:3] = PAD_POSITION
    mass = np.zeros(padded, dtype=HOST_DTYPE)
    mass[:n] = system.mass
    source_tiles = []
    source_mass = []
    for t in range(n_tiles):
        lo, hi = t * TILE_LANES, (t + 1) * TILE_LANES
        source_tiles.append(tuple(pack_column_tile(cols[lo:hi, a]) for a in range(N_SRC)))
        source_mass.append(pack_column_tile(mass[lo:hi]))
    return TiledWorkload(
        source_tiles=source_tiles,
        source_mass=source_mass,
        targets=target_rows(targets),
        softening_sq=softening_sq32(system.softening),
        n_sources=n,
    )


def tilize_sources(system: ParticleSystem) -> TiledWorkload:
    """Source-only workload (empty target stream); used by untilize checks."""
    wl = tilize(system)
    wl.targets = wl.targets[:0]
    return wl


def untilize_sources(workload: TiledWorkload) -> tuple[np.ndarray, np.ndarray]:
    """Recover float64 positions and velocities from the source tiles."""
    n = workload.n_sources
    cols = np.empty((len(workload.source_tiles) * TILE_LANES, N_SRC), dtype=HOST_DTYPE)
    for t, group in enumerate(workload.source_tiles):
        for a, tile in enumerate(group):
            cols[t * TILE_LANES:(t + 1) * TILE_LANES, a] = tile.lanes()
    return cols[:n, 0:3].copy(), cols[:n, 3:6].copy()


def untilize(result: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Result buffer (tiles, 6, 32, 32) float32 -> (acc, jerk) float64 arrays."""
    flat = result.reshape(result.shape[0], N_OUT, TILE_LANES)
    per_particle = flat.transpose(0, 2, 1).reshape(-1, N_OUT)[:n].astype(HOST_DTYPE)
    return per_particle[:, 0:3].copy(), per_particle[:, 3:6].copy()


def read_kernel(workload: TiledWorkload, cb_src: CircularBuffer, cb_tgt: CircularBuffer, trace=None) -> None:
    """Producer: source group, then the whole target stream, per source tile."""
    for i in workload.core_range:
        cb_src.reserve_back(N_SRC)
        cb_src.push_back(workload.source_tiles[i])
        if trace is not None:
            trace.append(("src", i))
        for j in range(workload.n_targets):
            cb_tgt.reserve_back(N_TGT)
            cb_tgt.push_back(workload.target_tiles(j))
            if trace is not None:
                trace.append(("tgt", j))


@dataclass
class PairScratch:
    """Per-core state reused across pair evaluations.

    Displacements and the (t, q) coefficients are staged through their own
    small circular buffers between dst acquire/release windows.
    """

    softening_sq: np.float32
    dst: DstRegisterFile = field(default_factory=DstRegisterFile)
    cb_disp: CircularBuffer = None
    cb_coef: CircularBuffer = None

    def __post_init__(self):
        if self.cb_disp is None:
            self.cb_disp = CircularBuffer(3, "disp")
        if self.cb_coef is None:
            self.cb_coef = CircularBuffer(2, "coef")
        self.eps_tile = broadcast_scalar(float(self.softening_sq))
        self.neg3_tile = broadcast_scalar(-3.0)


def _check_finite(*tiles: Tile) -> None:
    for t in tiles:
        if not np.isfinite(t.values).all():
            raise KernelError("non-finite intermediate in pair evaluation (check softening)")


def compute_pair_tile(src, tgt, accum, softening_sq, scratch: PairScratch | None = None) -> list[Tile]:
    """Fold one target particle into six accumulator tiles.

    ``src`` is (rx, ry, rz, vx, vy, vz), ``tgt`` the same plus the weight,
    ``accum`` (ax, ay, az, jx, jy, jz). Returns the new accumulator tiles.
    """
    if scratch is None:
        scratch = PairScratch(DEVICE_DTYPE(softening_sq))
    dst = scratch.dst
    rxi, ryi, rzi, vxi, vyi, vzi = src
    rxj, ryj, rzj, vxj, vyj, vzj, pw = tgt

    # displacement r_ij = r_j - r_i, staged for reuse
    dst.acquire()
    dst.compute(0, "sub", rxj, rxi)
    dst.compute(1, "sub", ryj, ryi)
    dst.compute(2, "sub", rzj, rzi)
    dst.release()
    scratch.cb_disp.reserve_back(3)
    scratch.cb_disp.push_back([dst.read(0), dst.read(1), dst.read(2)])

    rx, ry, rz = scratch.cb_disp.wait_front(3)

    # distances and scaling coefficients
    dst.acquire()
    r2 = dst.compute(0, "square", rx)
    r2 = dst.compute(0, "mul_add", ry, ry, r2)
    r2 = dst.compute(0, "mul_add", rz, rz, r2)
    r2 = dst.compute(0, "add", r2, scratch.eps_tile)
    rinv = dst.compute(1, "rsqrt", r2)
    rinv2 = dst.compute(2, "square", rinv)
    rinv3 = dst.compute(3, "mul", rinv2, rinv)
    t = dst.compute(4, "mul", pw, rinv3)
    a_coef = dst.compute(5, "mul", rinv2, scratch.neg3_tile)
    dv = dst.compute(0, "sub", vxj, vxi)
    vr = dst.compute(1, "mul", rx, dv)
    dv = dst.compute(0, "sub", vyj, vyi)
    vr = dst.compute(1, "mul_add", ry, dv, vr)
    dv = dst.compute(0, "sub", vzj, vzi)
    vr = dst.compute(1, "mul_add", rz, dv, vr)
    q = dst.compute(6, "mul", a_coef, vr)
    dst.release()
    _check_finite(t, q)
    scratch.cb_coef.reserve_back(2)
    scratch.cb_coef.push_back([t, q])

    t, q = scratch.cb_coef.wait_front(2)
    ax, ay, az, jx, jy, jz = accum

    # a += t * r_ij
    dst.acquire()
    ax = dst.compute(0, "mul_add", t, rx, ax)
    ay = dst.compute(1, "mul_add", t, ry, ay)
    az = dst.compute(2, "mul_add", t, rz, az)
    dst.release()

    # jerk += t * (v_ij + q * r_ij)
    dst.acquire()
    dv = dst.compute(0, "sub", vxj, vxi)
    inner = dst.compute(1, "mul_add", q, rx, dv)
    jx = dst.compute(2, "mul_add", t, inner, jx)
    dv = dst.compute(0, "sub", vyj, vyi)
    inner = dst.compute(1, "mul_add", q, ry, dv)
    jy = dst.compute(3, "mul_add", t, inner, jy)
    dv = dst.compute(0, "sub", vzj, vzi)
    inner = dst.compute(1, "mul_add", q, rz, dv)
    jz = dst.compute(4, "mul_add", t, inner, jz)
    dst.release()

    scratch.cb_coef.pop_front(2)
    scratch.cb_disp.pop_front(3)
    return [ax, ay, az, jx, jy, jz]


def compute_kernel(
    cb_src: CircularBuffer,
    cb_tgt: CircularBuffer,
    cb_out: CircularBuffer,
    n_targets: int,
    n_source_tiles: int,
    softening_sq,
    scratch: PairScratch | None = None,
) -> None:
    """Consumer of the read kernel, producer for the write kernel."""
    if scratch is None:
        scratch = PairScratch(DEVICE_DTYPE(softening_sq))
    for _ in range(n_source_tiles):
        src = cb_src.wait_front(N_SRC)
        cb_out.reserve_back(N_OUT)
        accum = [Tile.zeros() for _ in range(N_OUT)]
        for _j in range(n_targets):
            tgt = cb_tgt.wait_front(N_TGT)
            accum = compute_pair_tile(src, tgt, accum, softening_sq, scratch)
            cb_tgt.pop_front(N_TGT)
        _check_finite(*accum)
        cb_out.push_back(accum)
        cb_src.pop_front(N_SRC)


def write_kernel(cb_out: CircularBuffer, result: np.ndarray, tile_indices) -> None:
    """Drain accumulator groups into ``result[(tile, 6, 32, 32)]``."""
    for i in tile_indices:
        if not 0 <= i < result.shape[0]:
            raise KernelError(f"result buffer holds {result.shape[0]} tile groups, index {i} out of range")
        group = cb_out.wait_front(N_OUT)
        for a, tile in enumerate(group):
            result[i, a] = tile.values
        cb_out.pop_front(N_OUT)


def new_result_buffer(n_source_tiles: int) -> np.ndarray:
    return np.zeros((n_source_tiles, N_OUT, TILE_ROWS, TILE_COLS), dtype=DEVICE_DTYPE)


def run_core_pipeline(
    workload: TiledWorkload,
    result: np.ndarray,
    depth: int = CB_DEPTH,
    timeout: float | None = None,
    trace=None,
) -> dict:
    """Run read, compute and write for ``workload.core_range`` to completion.

    Read and write run on helper threads; compute runs on the calling
    thread. Returns CB statistics.
    """
    cb_src = CircularBuffer(depth * N_SRC, "src", timeout)
    cb_tgt = CircularBuffer(depth * N_TGT, "tgt", timeout)
    cb_out = CircularBuffer(depth * N_OUT, "out", timeout)
    cbs = (cb_src, cb_tgt, cb_out)
    errors: list[BaseException] = []

    def guarded(fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # noqa: BLE001 - re-raised on the caller thread
            errors.append(exc)
            for cb in cbs:
                cb.abort(exc)

    reader = threading.Thread(target=guarded, args=(read_kernel, workload, cb_src, cb_tgt, trace), daemon=True)
    writer = threading.Thread(target=guarded, args=(write_kernel, cb_out, result, workload.core_range), daemon=True)
    reader.start()
    writer.start()
    guarded(
        compute_kernel,
        cb_src,
        cb_tgt,
        cb_out,
        workload.n_targets,
        len(workload.core_range),
        workload.softening_sq,
    )
    reader.join()
    writer.join()
    if errors:
        # report the root cause, not the aborts it triggered in other workers
        primary = [e for e in errors if not isinstance(e, PipelineAborted)]
        raise (primary or errors)[0]
    return {cb.name: {"pushed": cb.pushed_total, "max_occupancy": cb.max_occupancy} for cb in cbs}


def pair_interaction_count(workload: TiledWorkload) -> int:
    return len(workload.core_range) * workload.n_targets


def expected_pushes(n_source_tiles: int, n_targets: int) -> int:
    return n_source_tiles * (N_SRC + n_targets * N_TGT)


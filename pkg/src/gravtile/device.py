"""A simulated accelerator chip.

A :class:`SimChip` owns a keyed DRAM store, an in-order command queue for
asynchronous host writes, and ``core_count`` logical cores. Each active core
runs the read/compute/write pipeline from :mod:`gravtile.kernels` over its
share of source tiles. Logical cores are multiplexed onto a bounded thread
pool.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    DEVICE_DTYPE,
    HOST_DTYPE,
    TILE_BYTES,
    TILE_COLS,
    TILE_LANES,
    TILE_ROWS,
    GravtileError,
    ParticleSystem,
    Tile,
)
from .kernels import (
    CB_DEPTH,
    N_OUT,
    N_SRC,
    N_TGT,
    TiledWorkload,
    new_result_buffer,
    run_core_pipeline,
    tilize,
    untilize,
)

MAX_CORES = 64


class DeviceError(GravtileError):
    pass


def split_work_to_cores(num_tiles: int, num_cores: int) -> list[range]:
    """Contiguous per-core tile ranges.

    The first ``num_tiles % num_cores`` cores get one extra tile; cores past
    ``num_tiles`` get empty ranges.
    """
    if num_cores < 1:
        raise DeviceError(f"num_cores must be >= 1, got {num_cores}")
    if num_tiles < 0:
        raise DeviceError(f"num_tiles must be >= 0, got {num_tiles}")
    base, extra = divmod(num_tiles, num_cores)
    ranges = []
    start = 0
    for core in range(num_cores):
        size = base + (1 if core < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return ranges


@dataclass(frozen=True)
class TransferRecord:
    direction: str  # "h2d", "d2h" or "d2d"
    key: str
    nbytes: int


class DeviceBuffer:
    __slots__ = ("data", "logical_nbytes")

    def __init__(self, data: np.ndarray, logical_nbytes: int):
        self.data = data
        self.logical_nbytes = logical_nbytes


class SimChip:
    def __init__(self, core_count: int = MAX_CORES, workers: int | None = None, name: str = "chip",
                 cb_depth: int = CB_DEPTH, timeout: float | None = 600.0):
        if not 1 <= core_count <= MAX_CORES:
            raise DeviceError(f"core_count must be in [1, {MAX_CORES}], got {core_count}")
        self.core_count = core_count
        self.workers = workers or os.cpu_count() or 1
        self.name = name
        self.cb_depth = cb_depth
        self.timeout = timeout
        self.dram: dict[str, DeviceBuffer] = {}
        self.transfer_log: list[TransferRecord] = []
        self._lock = threading.Lock()
        self._queue = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"{name}-cq")
        self._pending: list[Future] = []

    def __repr__(self):
        return f"SimChip({self.name!r}, core_count={self.core_count})"

    def close(self) -> None:
        self._queue.shutdown(wait=True)

    def log(self, direction: str, key: str, nbytes: int) -> None:
        with self._lock:
            self.transfer_log.append(TransferRecord(direction, key, int(nbytes)))

    def bytes_moved(self, direction: str) -> int:
        with self._lock:
            return sum(r.nbytes for r in self.transfer_log if r.direction == direction)

    def clear_log(self) -> None:
        with self._lock:
            self.transfer_log.clear()

    def create_buffer(self, key: str, data: np.ndarray, logical_nbytes: int | None = None) -> None:
        with self._lock:
            self.dram[key] = DeviceBuffer(data, data.nbytes if logical_nbytes is None else logical_nbytes)

    def buffer(self, key: str) -> DeviceBuffer:
        with self._lock:
            try:
                return self.dram[key]
            except KeyError:
                raise DeviceError(f"{self.name}: no device buffer {key!r}") from None

    def finish(self) -> None:
        """Completion fence for everything enqueued so far."""
        with self._lock:
            pending, self._pending = self._pending, []
        for fut in pending:
            fut.result()


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return np.array(data, copy=True)
    return np.frombuffer(bytes(data), dtype=np.uint8).copy()


def enqueue_write_buffer(chip: SimChip, key: str, data, blocking: bool = False,
                         logical_nbytes: int | None = None) -> Future:
    """Copy ``data`` into device buffer ``key`` on the chip's command queue.

    Writes complete in enqueue order, so the last write to a key wins.
    ``logical_nbytes`` is what the transfer log records when the stored form
    is more compact than what the hardware would move (lazy replication).
    """
    payload = _as_array(data)
    nbytes = payload.nbytes if logical_nbytes is None else logical_nbytes

    def work():
        chip.create_buffer(key, payload, nbytes)
        chip.log("h2d", key, nbytes)

    fut = chip._queue.submit(work)
    with chip._lock:
        chip._pending.append(fut)
    if blocking:
        fut.result()
    return fut


def enqueue_read_buffer(chip: SimChip, key: str) -> bytes:
    """Return the full contents of ``key`` after all queued work completes."""
    chip.finish()
    buf = chip.buffer(key)
    out = buf.data.tobytes()
    chip.log("d2h", key, buf.logical_nbytes)
    return out


def _source_array(workload: TiledWorkload) -> np.ndarray:
    arr = np.empty((workload.n_source_tiles, N_SRC, TILE_ROWS, TILE_COLS), dtype=DEVICE_DTYPE)
    for i, group in enumerate(workload.source_tiles):
        for a, tile in enumerate(group):
            arr[i, a] = tile.values
    return arr


def _workload_from_dram(chip: SimChip, template: TiledWorkload) -> TiledWorkload:
    src = chip.buffer("src").data.view(DEVICE_DTYPE).reshape(-1, N_SRC, TILE_ROWS, TILE_COLS)
    tgt = chip.buffer("tgt").data.view(DEVICE_DTYPE).reshape(-1, N_TGT)
    source_tiles = [tuple(Tile(src[i, a]) for a in range(N_SRC)) for i in range(src.shape[0])]
    return TiledWorkload(
        source_tiles=source_tiles,
        source_mass=template.source_mass,
        targets=tgt.astype(HOST_DTYPE),
        softening_sq=template.softening_sq,
        n_sources=template.n_sources,
    )


def run_force_program(chip: SimChip, system_slice, full_system: ParticleSystem) -> tuple[np.ndarray, np.ndarray]:
    """Accelerations and jerks of ``full_system[system_slice]`` on ``chip``.

    ``system_slice`` is a contiguous ``slice``/``range`` of particle indices
    (step 1). Every particle of ``full_system`` is streamed as a target.
    """
    start, stop, step = _as_bounds(system_slice, full_system.n)
    if step != 1:
        raise DeviceError("system_slice must be contiguous")
    count = stop - start
    if count <= 0:
        empty = np.zeros((0, 3), dtype=HOST_DTYPE)
        return empty, empty.copy()

    template = tilize(full_system.subset(start, stop), targets=full_system)
    n_tiles = template.n_source_tiles
    n_targets = template.n_targets

    enqueue_write_buffer(chip, "src", _source_array(template))
    # the target stream is stored compactly and broadcast by the reader, but the
    # hardware moves the fully replicated tiles
    enqueue_write_buffer(chip, "tgt", template.targets.astype(DEVICE_DTYPE),
                         logical_nbytes=n_targets * N_TGT * TILE_BYTES)
    chip.finish()

    workload = _workload_from_dram(chip, template)
    result = new_result_buffer(n_tiles)
    chip.create_buffer("out", result)

    ranges = [r for r in split_work_to_cores(n_tiles, chip.core_count) if len(r)]
    errors: list[tuple[int, BaseException]] = []

    def run_core(core: int, tile_range: range):
        try:
            run_core_pipeline(workload.for_cores(tile_range), result, depth=chip.cb_depth, timeout=chip.timeout)
        except BaseException as exc:  # noqa: BLE001 - reported below with the core index
            errors.append((core, exc))

    pool_size = min(chip.workers, len(ranges))
    if pool_size <= 1:
        for core, r in enumerate(ranges):
            run_core(core, r)
    else:
        with ThreadPoolExecutor(max_workers=pool_size, thread_name_prefix=f"{chip.name}-core") as pool:
            for core, r in enumerate(ranges):
                pool.submit(run_core, core, r)
    if errors:
        core, exc = min(errors, key=lambda e: e[0])
        raise DeviceError(f"{chip.name} core {core}: {exc}") from exc

    raw = enqueue_read_buffer(chip, "out")
    out = np.frombuffer(raw, dtype=DEVICE_DTYPE).reshape(n_tiles, N_OUT, TILE_ROWS, TILE_COLS)
    return untilize(out, count)


def _as_bounds(sl, n: int) -> tuple[int, int, int]:
    if isinstance(sl, range):
        return sl.start, sl.stop, sl.step
    if isinstance(sl, slice):
        return sl.indices(n)
    start, stop = sl
    return int(start), int(stop), 1


def expected_transfer_bytes(n_slice: int, n_targets: int) -> dict:
    tiles = -(-n_slice // TILE_LANES)
    return {
        "h2d": (tiles * N_SRC + n_targets * N_TGT) * TILE_BYTES,
        "d2h": tiles * N_OUT * TILE_BYTES,
    }

"""Elementwise tile math, the dst register file and circular buffers.

All arithmetic is float32 with round-to-nearest after every elementary
operation. ``rsqrt`` is evaluated as ``1/sqrt(x)`` in float64 and rounded
once to float32, so it is deterministic and platform independent.
"""

from __future__ import annotations

import threading
from collections import deque

import numpy as np

from .core import DEVICE_DTYPE, GravtileError, Tile

DST_SLOTS = 8

UNARY_OPS = frozenset({"square", "rsqrt"})
BINARY_OPS = frozenset({"sub", "add", "mul"})
TERNARY_OPS = frozenset({"mul_add"})
TILE_OPS = UNARY_OPS | BINARY_OPS | TERNARY_OPS


class TileOpError(GravtileError):
    pass


class DstRegisterError(GravtileError):
    pass


class CircularBufferError(GravtileError):
    pass


class CircularBufferTimeout(CircularBufferError):
    """A blocking CB call waited longer than its timeout (likely deadlock)."""


class PipelineAborted(CircularBufferError):
    """Raised in workers blocked on a CB whose pipeline was torn down."""


def _wrap(arr: np.ndarray) -> Tile:
    # hot path: skip the shape/dtype checks of Tile.__init__
    t = Tile.__new__(Tile)
    t.values = arr
    return t


def _rsqrt(x: np.ndarray) -> np.ndarray:
    if (x < 0).any():
        raise TileOpError("rsqrt of a negative lane")
    with np.errstate(divide="ignore"):
        return (1.0 / np.sqrt(x.astype(np.float64))).astype(DEVICE_DTYPE)


def tile_elementwise(op: str, a: Tile, b: Tile | None = None, c: Tile | None = None) -> Tile:
    """Apply ``op`` lane-wise.

    ``mul_add(a, b, c)`` is ``fl32(fl32(a*b) + c)``: two roundings, not a
    fused multiply-add.
    """
    if op not in TILE_OPS:
        raise TileOpError(f"unknown tile op {op!r}")
    given = sum(t is not None for t in (a, b, c))
    arity = 1 if op in UNARY_OPS else 2 if op in BINARY_OPS else 3
    if given != arity or (arity >= 2 and b is None) or (arity == 3 and c is None):
        raise TileOpError(f"{op} takes {arity} operand(s), got {given}")
    x = a.values
    if op == "sub":
        out = x - b.values
    elif op == "add":
        out = x + b.values
    elif op == "mul":
        out = x * b.values
    elif op == "square":
        out = x * x
    elif op == "rsqrt":
        out = _rsqrt(x)
    else:
        out = x * b.values
        out += c.values
    return _wrap(out)


class DstRegisterFile:
    """The eight-slot destination register bank of one compute core.

    Writes are only legal between :meth:`acquire` and :meth:`release`.
    Tiles staged during a window stay readable after release (so they can be
    packed) and are discarded by the next acquire.
    """

    def __init__(self, slots: int = DST_SLOTS):
        self.capacity = slots
        self.slots: list[Tile | None] = [None] * slots
        self.acquired = False
        self.acquire_count = 0

    def acquire(self) -> None:
        if self.acquired:
            raise DstRegisterError("dst register already acquired")
        self.slots = [None] * self.capacity
        self.acquired = True
        self.acquire_count += 1

    def release(self) -> None:
        if not self.acquired:
            raise DstRegisterError("dst register released without acquire")
        self.acquired = False

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.acquired:
            self.release()
        return False

    @property
    def occupancy(self) -> int:
        return sum(s is not None for s in self.slots)

    def _check_slot(self, slot: int) -> None:
        if not 0 <= slot < self.capacity:
            raise DstRegisterError(f"dst slot {slot} outside [0, {self.capacity})")

    def write(self, slot: int, tile: Tile) -> Tile:
        if not self.acquired:
            raise DstRegisterError("dst write without acquire")
        self._check_slot(slot)
        self.slots[slot] = tile
        return tile

    def stage(self, tile: Tile) -> int:
        """Put ``tile`` in the lowest free slot and return its index."""
        if not self.acquired:
            raise DstRegisterError("dst write without acquire")
        for i, s in enumerate(self.slots):
            if s is None:
                self.slots[i] = tile
                return i
        raise DstRegisterError(f"dst register full ({self.capacity} tiles)")

    def compute(self, slot: int, op: str, a: Tile, b: Tile | None = None, c: Tile | None = None) -> Tile:
        if not self.acquired:
            raise DstRegisterError("dst write without acquire")
        self._check_slot(slot)
        out = tile_elementwise(op, a, b, c)
        self.slots[slot] = out
        return out

    def read(self, slot: int) -> Tile:
        self._check_slot(slot)
        tile = self.slots[slot]
        if tile is None:
            raise DstRegisterError(f"dst slot {slot} is empty")
        return tile


class CircularBuffer:
    """Bounded FIFO of tiles connecting one producer and one consumer.

    Producer side: ``reserve_back(k)`` then ``push_back(tiles)`` with exactly
    ``k`` tiles. Consumer side: ``wait_front(k)`` then ``pop_front(k)``.
    Blocking calls raise :class:`CircularBufferTimeout` after ``timeout``
    seconds (``None`` waits forever).
    """

    def __init__(self, capacity: int, name: str = "cb", timeout: float | None = None):
        if capacity < 1:
            raise CircularBufferError(f"{name}: capacity must be >= 1")
        self.capacity = capacity
        self.name = name
        self.timeout = timeout
        self._queue: deque[Tile] = deque()
        self._cond = threading.Condition()
        self._reserved = 0
        self._waited = 0
        self._aborted: BaseException | None = None
        self.pushed_total = 0
        self.popped_total = 0
        self.max_occupancy = 0

    def __repr__(self):
        return f"CircularBuffer({self.name!r}, capacity={self.capacity}, occupancy={len(self._queue)})"

    @property
    def occupancy(self) -> int:
        return len(self._queue)

    def _check_count(self, k: int) -> None:
        if k < 1:
            raise CircularBufferError(f"{self.name}: tile count must be >= 1, got {k}")
        if k > self.capacity:
            raise CircularBufferError(
                f"{self.name}: request for {k} tiles exceeds capacity {self.capacity} (would deadlock)"
            )

    def _block_until(self, predicate, what: str) -> None:
        # caller holds self._cond
        ok = self._cond.wait_for(lambda: self._aborted is not None or predicate(), timeout=self.timeout)
        if self._aborted is not None:
            raise PipelineAborted(f"{self.name}: pipeline aborted") from self._aborted
        if not ok:
            raise CircularBufferTimeout(f"{self.name}: timed out in {what}")

    def reserve_back(self, k: int) -> None:
        self._check_count(k)
        with self._cond:
            self._block_until(lambda: self.capacity - len(self._queue) >= k, f"reserve_back({k})")
            self._reserved = k

    def push_back(self, tiles) -> None:
        tiles = list(tiles)
        with self._cond:
            if self._reserved == 0:
                raise CircularBufferError(f"{self.name}: push_back without reserve_back")
            if len(tiles) != self._reserved:
                raise CircularBufferError(
                    f"{self.name}: pushed {len(tiles)} tiles but reserved {self._reserved}"
                )
            self._queue.extend(tiles)
            self._reserved = 0
            self.pushed_total += len(tiles)
            if len(self._queue) > self.max_occupancy:
                self.max_occupancy = len(self._queue)
            self._cond.notify_all()

    def wait_front(self, k: int) -> list[Tile]:
        """Block until ``k`` tiles are visible and return them (not removed)."""
        self._check_count(k)
        with self._cond:
            self._block_until(lambda: len(self._queue) >= k, f"wait_front({k})")
            self._waited = k
            return [self._queue[i] for i in range(k)]

    def pop_front(self, k: int) -> None:
        if k < 1:
            raise CircularBufferError(f"{self.name}: tile count must be >= 1, got {k}")
        with self._cond:
            if self._waited < k:
                raise CircularBufferError(f"{self.name}: pop_front({k}) without matching wait_front")
            for _ in range(k):
                self._queue.popleft()
            self._waited -= k
            self.popped_total += k
            self._cond.notify_all()

    def abort(self, exc: BaseException | None = None) -> None:
        """Wake every blocked caller with :class:`PipelineAborted`."""
        with self._cond:
            self._aborted = exc if exc is not None else PipelineAborted(self.name)
            self._cond.notify_all()

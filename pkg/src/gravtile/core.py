"""Domain types shared across the package.

The particle state lives on the host in float64. The accelerator works on
:class:`Tile` objects: 32x32 grids of float32 values. Lane ``k`` of a tile is
``values[k // 32, k % 32]`` (row-major), which is the order used everywhere a
tile is packed from or unpacked into a flat sequence.
"""

from __future__ import annotations

import enum
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TILE_ROWS = 32
TILE_COLS = 32
TILE_LANES = TILE_ROWS * TILE_COLS
TILE_BYTES = TILE_LANES * 4

DEVICE_DTYPE = np.float32
HOST_DTYPE = np.float64

SNAPSHOT_MAGIC = "gravtile"
SNAPSHOT_VERSION = 1


class GravtileError(Exception):
    """Base class for errors raised by this package."""


class TileError(GravtileError):
    pass


class EvalPrecision(enum.Enum):
    FP32 = "fp32"


class HostPrecision(enum.Enum):
    FP64 = "fp64"


@dataclass(frozen=True)
class PrecisionPolicy:
    """Device evaluation runs in float32, everything on the host in float64."""

    eval_precision: EvalPrecision = EvalPrecision.FP32
    host_precision: HostPrecision = HostPrecision.FP64

    @property
    def eval_dtype(self):
        return DEVICE_DTYPE

    @property
    def host_dtype(self):
        return HOST_DTYPE


DEFAULT_PRECISION = PrecisionPolicy()


class Tile:
    """A 32x32 grid of float32 values."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        values = np.asarray(values)
        if values.shape != (TILE_ROWS, TILE_COLS):
            raise TileError(f"tile must be {TILE_ROWS}x{TILE_COLS}, got {values.shape}")
        if values.dtype != DEVICE_DTYPE:
            raise TileError(f"tile dtype must be float32, got {values.dtype}")
        self.values = values

    @classmethod
    def zeros(cls) -> "Tile":
        return cls(np.zeros((TILE_ROWS, TILE_COLS), dtype=DEVICE_DTYPE))

    def lane(self, k: int) -> np.float32:
        if not 0 <= k < TILE_LANES:
            raise IndexError(f"lane {k} out of range")
        return self.values[k // TILE_COLS, k % TILE_COLS]

    def lanes(self) -> np.ndarray:
        """Flat row-major view of the 1024 lanes."""
        return self.values.reshape(TILE_LANES)

    def tobytes(self) -> bytes:
        return self.values.tobytes()

    @classmethod
    def frombytes(cls, data: bytes) -> "Tile":
        if len(data) != TILE_BYTES:
            raise TileError(f"expected {TILE_BYTES} bytes, got {len(data)}")
        arr = np.frombuffer(data, dtype=DEVICE_DTYPE).reshape(TILE_ROWS, TILE_COLS)
        return cls(arr.copy())

    def __eq__(self, other):
        if not isinstance(other, Tile):
            return NotImplemented
        # bitwise comparison so that -0.0/0.0 and NaN payloads are distinguished
        return self.values.tobytes() == other.values.tobytes()

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        flat = self.lanes()
        return f"Tile(lane0={flat[0]!r}, lane1023={flat[-1]!r})"


def broadcast_scalar(x: float) -> Tile:
    """Tile holding 1024 copies of ``x`` rounded to float32."""
    if not math.isfinite(x):
        raise TileError(f"cannot broadcast non-finite value {x!r}")
    with np.errstate(over="ignore"):
        v = DEVICE_DTYPE(x)
    if not np.isfinite(v):
        raise TileError(f"{x!r} overflows float32")
    return Tile(np.full((TILE_ROWS, TILE_COLS), v, dtype=DEVICE_DTYPE))


def pack_column_tile(values) -> Tile:
    """Pack 1024 distinct values into one tile, lane k <- values[k]."""
    arr = np.asarray(values, dtype=HOST_DTYPE)
    if arr.shape != (TILE_LANES,):
        raise TileError(f"column tile needs exactly {TILE_LANES} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise TileError("column tile values must be finite")
    with np.errstate(over="ignore"):
        packed = arr.astype(DEVICE_DTYPE)
    if not np.all(np.isfinite(packed)):
        raise TileError("column tile values overflow float32")
    return Tile(packed.reshape(TILE_ROWS, TILE_COLS))


def unpack_tile(tile: Tile) -> np.ndarray:
    """Lane read-back as float64, in lane order."""
    return tile.lanes().astype(HOST_DTYPE)


@dataclass
class ParticleSystem:
    """Host-side simulation state, all float64.

    ``acc``/``jerk`` hold the derivatives at ``time``; ``acc_prev``/``jerk_prev``
    keep the previous step's values for the corrector. ``snap``/``crackle``
    are only populated by the sixth-order integrator.
    """

    mass: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray = None
    jerk: np.ndarray = None
    acc_prev: np.ndarray = None
    jerk_prev: np.ndarray = None
    snap: np.ndarray = None
    crackle: np.ndarray = None
    time: float = 0.0
    grav_const: float = 1.0
    softening: float = 1.0e-7
    has_derivatives: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.mass = np.array(self.mass, dtype=HOST_DTYPE).reshape(-1)
        n = self.mass.size
        self.pos = np.array(self.pos, dtype=HOST_DTYPE).reshape(n, 3)
        self.vel = np.array(self.vel, dtype=HOST_DTYPE).reshape(n, 3)
        for name in ("acc", "jerk", "acc_prev", "jerk_prev", "snap", "crackle"):
            arr = getattr(self, name)
            if arr is None:
                arr = np.zeros((n, 3), dtype=HOST_DTYPE)
            else:
                arr = np.array(arr, dtype=HOST_DTYPE).reshape(n, 3)
            setattr(self, name, arr)
        self.time = float(self.time)
        self.grav_const = float(self.grav_const)
        self.softening = float(self.softening)
        self.validate()

    @property
    def n(self) -> int:
        return self.mass.size

    def validate(self) -> None:
        if self.n < 1:
            raise GravtileError("a particle system needs at least one particle")
        if not np.all(self.mass > 0):
            raise GravtileError("all masses must be positive")
        if not math.isfinite(self.time):
            raise GravtileError("time must be finite")
        if not (math.isfinite(self.grav_const) and self.grav_const > 0):
            raise GravtileError("gravitational constant must be positive and finite")
        if not (math.isfinite(self.softening) and self.softening >= 0):
            raise GravtileError("softening must be non-negative and finite")
        for name in ("mass", "pos", "vel", "acc", "jerk", "acc_prev", "jerk_prev", "snap", "crackle"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise GravtileError(f"non-finite values in {name}")

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(
            mass=self.mass.copy(),
            pos=self.pos.copy(),
            vel=self.vel.copy(),
            acc=self.acc.copy(),
            jerk=self.jerk.copy(),
            acc_prev=self.acc_prev.copy(),
            jerk_prev=self.jerk_prev.copy(),
            snap=self.snap.copy(),
            crackle=self.crackle.copy(),
            time=self.time,
            grav_const=self.grav_const,
            softening=self.softening,
            has_derivatives=self.has_derivatives,
        )

    def subset(self, start: int, stop: int) -> "ParticleSystem":
        """Contiguous slice of particles; shares nothing with ``self``."""
        sl = slice(start, stop)
        return ParticleSystem(
            mass=self.mass[sl].copy(),
            pos=self.pos[sl].copy(),
            vel=self.vel[sl].copy(),
            time=self.time,
            grav_const=self.grav_const,
            softening=self.softening,
        )

    def momentum(self) -> np.ndarray:
        return (self.mass[:, None] * self.vel).sum(axis=0)

    def center_of_mass(self) -> np.ndarray:
        return (self.mass[:, None] * self.pos).sum(axis=0) / self.mass.sum()


def write_snapshot(system: ParticleSystem, path) -> None:
    """Write ``mass x y z vx vy vz`` rows; the file appears atomically."""
    path = Path(path)
    lines = [
        f"# {SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION} n={system.n} "
        f"t={system.time:.17g} G={system.grav_const:.17g}\n"
    ]
    rows = np.column_stack([system.mass, system.pos, system.vel])
    for row in rows:
        lines.append(" ".join(f"{x:.17g}" for x in row) + "\n")
    atomic_write_text(path, "".join(lines))


def read_snapshot(path, softening: float = 1.0e-7) -> ParticleSystem:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        body = fh.read()
    fields = header.lstrip("#").split()
    if len(fields) < 2 or fields[0] != SNAPSHOT_MAGIC or fields[1] != f"v{SNAPSHOT_VERSION}":
        raise GravtileError(f"{path}: not a {SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION} snapshot")
    meta = dict(f.split("=", 1) for f in fields[2:])
    try:
        n = int(meta["n"])
        time = float(meta["t"])
        grav_const = float(meta["G"])
    except (KeyError, ValueError) as exc:
        raise GravtileError(f"{path}: malformed header {header!r}") from exc
    rows = np.array([[float(x) for x in line.split()] for line in body.splitlines() if line.strip()])
    if rows.shape != (n, 7):
        raise GravtileError(f"{path}: expected {n} rows of 7 columns, got shape {rows.shape}")
    return ParticleSystem(
        mass=rows[:, 0],
        pos=rows[:, 1:4],
        vel=rows[:, 4:7],
        time=time,
        grav_const=grav_const,
        softening=softening,
    )


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

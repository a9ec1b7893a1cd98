"""Direct-summation gravitational N-body on a simulated tiled accelerator."""

from .core import GravtileError, ParticleSystem, Tile, read_snapshot, write_snapshot
from .device import SimChip, run_force_program, split_work_to_cores
from .hermite import (
    GoldenOracle,
    IntegratorConfig,
    Order,
    SimDevice,
    energy_report,
    generate_initial_conditions,
    golden_acc_jerk,
    run,
)
from .topology import ClusterConfig, Mode, decompose, estimate_time, execute_evaluation

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig",
    "GoldenOracle",
    "GravtileError",
    "IntegratorConfig",
    "Mode",
    "Order",
    "ParticleSystem",
    "SimChip",
    "SimDevice",
    "Tile",
    "decompose",
    "energy_report",
    "estimate_time",
    "execute_evaluation",
    "generate_initial_conditions",
    "golden_acc_jerk",
    "read_snapshot",
    "run",
    "run_force_program",
    "split_work_to_cores",
    "write_snapshot",
]

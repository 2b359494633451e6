"""Memory-frugal unrolled diffusion solver for channel gain map reconstruction."""

from .grid import make_rng, read_grid, write_grid
from .measurement import MeasurementOp, apply_A, apply_At, dc_project, make_mask
from .sampler import Inputs, SamplerState, Schedule, SolverConfig, init_solver_params, solve
from .unet import Mode, UNetConfig

__version__ = "0.1.0"

__all__ = [
    "Inputs", "MeasurementOp", "Mode", "SamplerState", "Schedule", "SolverConfig", "UNetConfig",
    "apply_A", "apply_At", "dc_project", "init_solver_params", "make_mask", "make_rng", "read_grid",
    "solve", "write_grid",
]

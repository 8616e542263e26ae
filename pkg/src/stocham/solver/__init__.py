"""Finite-volume thermal and thermal-fluid solver."""
from .fluid import FluidParams, FluidStepper, ProjectionError, divergence
from .grid import FieldState, Grid, grid_for_plan
from .run import (
    ParameterSeries,
    SeriesExhaustedError,
    SimulationResult,
    SolverConfig,
    StabilityError,
    load_result,
    max_stable_dt,
    plan_steps,
    run,
    save_result,
    step_energy,
    step_fluid,
)
from .snapshot import load_snapshot, save_snapshot

__all__ = [
    "FieldState", "Grid", "grid_for_plan", "ParameterSeries", "SeriesExhaustedError",
    "SimulationResult", "SolverConfig", "StabilityError", "max_stable_dt", "run",
    "step_energy", "step_fluid", "FluidParams", "FluidStepper", "ProjectionError",
    "divergence", "load_snapshot", "save_snapshot", "plan_steps", "save_result", "load_result",
]

"""Successive convexification with self-tuning penalty weights for 3-DoF reentry."""
from importlib.resources import files

from .discretize import DiscretizationResult, ReferenceTrajectory, discretize, single_shoot
from .engine import PTR, AutoSCvx, SolveReport, SolverSettings, SolveStatus, autoscvx_solve, ptr_solve
from .ocp import MissionConfig, ProblemSpec, build_reentry_problem, initial_guess, load_config
from .qp import QpProblem, QpSettings, QpStatus, solve_qp
from .scaling import PhysicalConstants, make_scales
from .subproblem import PenaltyState
from .vehicle import ControlMode, PathLimits, ReentryVehicle, VehicleParams

__version__ = "0.1.0"


def example_config(name: str):
    """Path to a bundled mission file, ``"a"`` or ``"b"``."""
    return files(__package__) / "configs" / f"example_{name.lower()}.yaml"


__all__ = [
    "AutoSCvx", "PTR", "SolveReport", "SolverSettings", "SolveStatus", "autoscvx_solve", "ptr_solve",
    "MissionConfig", "ProblemSpec", "build_reentry_problem", "initial_guess", "load_config",
    "ReferenceTrajectory", "DiscretizationResult", "discretize", "single_shoot",
    "QpProblem", "QpSettings", "QpStatus", "solve_qp", "PhysicalConstants", "make_scales",
    "PenaltyState", "ControlMode", "PathLimits", "ReentryVehicle", "VehicleParams", "example_config",
]

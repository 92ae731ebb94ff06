"""Simulation and numerical verification of time-inhomogeneous jump processes
on finite point configurations."""

__version__ = "0.1.0"

from .configuration import Configuration, lyapunov_V
from .errors import BdjumpError
from .jump_core import JumpKernel, SimOptions, Trajectory, ensemble_expectation, simulate_path
from .models import BdlpParams, DlParams, GdlParams, ParticleKernel, immigration_death
from .series_solver import FiniteKernel, minimal_solution

__all__ = [
    "BdjumpError",
    "BdlpParams",
    "Configuration",
    "DlParams",
    "FiniteKernel",
    "GdlParams",
    "JumpKernel",
    "ParticleKernel",
    "SimOptions",
    "Trajectory",
    "ensemble_expectation",
    "immigration_death",
    "lyapunov_V",
    "minimal_solution",
    "simulate_path",
]

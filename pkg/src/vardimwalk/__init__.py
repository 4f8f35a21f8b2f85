"""Random walks on lattice approximations of a plane with a rod attached at a collapsed disk."""
from .estimators import GeodesicProjection, LatticeWalk
from .harness import ExperimentConfig, Report, run
from .lattice import LatticeGraph, LatticeParams, ParameterError, build_graphs
from .measures import JumpKernel, MeasureTable, kernel, measures
from .walker import Path, simulate_killed, simulate_paths, simulate_reflected, w_rho_at_most

__all__ = [
    "ExperimentConfig",
    "GeodesicProjection",
    "JumpKernel",
    "LatticeGraph",
    "LatticeParams",
    "LatticeWalk",
    "MeasureTable",
    "ParameterError",
    "Path",
    "Report",
    "build_graphs",
    "kernel",
    "measures",
    "run",
    "simulate_killed",
    "simulate_paths",
    "simulate_reflected",
    "w_rho_at_most",
]
__version__ = "0.1.0"

"""Hybrid dynamics, trajectory optimization and stability analysis for
vertically constrained moving-mass hopping robots."""

__version__ = "0.1.0"

from .model import ModelParams, MotorModel, State, Variant, nominal_params, load_params
from .hybrid import DomainId, GuardKind
from .control import ControlPolicy, ControlSignal, PDGains
from .integrate import IntegratorConfig, StopCondition, simulate_hybrid
from .optimize import HopProblem, HopSolution, solve_hop, validate_solution
from .analyze import energy_report, compare_models, solution_stability, stability_eigenvalues
from .calibrate import DropTestLog, fit_parameters

__all__ = [
    "ModelParams",
    "MotorModel",
    "State",
    "Variant",
    "nominal_params",
    "load_params",
    "DomainId",
    "GuardKind",
    "ControlPolicy",
    "ControlSignal",
    "PDGains",
    "IntegratorConfig",
    "StopCondition",
    "simulate_hybrid",
    "HopProblem",
    "HopSolution",
    "solve_hop",
    "validate_solution",
    "energy_report",
    "compare_models",
    "solution_stability",
    "stability_eigenvalues",
    "DropTestLog",
    "fit_parameters",
]

"""Tube-based robust MPC voltage control for islanded AC microgrids."""

from .config import DroopParams, LoadSpec, ScenarioConfig, parse_config
from .convexsets import Box, Ellipsoid, HPolytope, Zonotope
from .dqplant import (DiscreteModel, FilterParams, PlantState, StateVec4,
                      TruePlant, UncertaintyBounds, build_model)
from .gpregress import (DisturbanceSetParams, GpDataset, GpHyperparams,
                        GpModel, GpPrediction)
from .gridsim import SimTrace, ThdReport, run_single_dg, run_two_dg, thd
from .qpsolver import Qp, QpSolution
from .tubempc import ControllerWeights, StepMonitor, TubeController, build_controller

__version__ = "0.1.0"

__all__ = [
    "Box", "ControllerWeights", "DiscreteModel", "DisturbanceSetParams",
    "DroopParams", "Ellipsoid", "FilterParams", "GpDataset", "GpHyperparams",
    "GpModel", "GpPrediction", "HPolytope", "LoadSpec", "PlantState", "Qp",
    "QpSolution", "ScenarioConfig", "SimTrace", "StateVec4", "StepMonitor",
    "ThdReport", "TruePlant", "TubeController", "UncertaintyBounds",
    "Zonotope", "build_controller", "build_model", "parse_config",
    "run_single_dg", "run_two_dg", "thd",
]

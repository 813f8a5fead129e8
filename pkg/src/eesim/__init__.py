"""Trace-driven simulator for early-exit (EE) model serving.

The package models a served DNN as a layer DAG with latency profiles,
reads workload traces that carry per-ramp confidence signals (so no model
inference is ever run), and simulates queuing, batching, and the two
runtime control loops that manage the early-exit configuration: frequent
accuracy-guarded threshold tuning and periodic utility-driven ramp
adjustment.
"""

__version__ = "0.1.0"

from eesim.engine import EEConfig, ExitOutcome, evaluate_record, evaluate_window, optimal_exit
from eesim.errors import (
    EESimError,
    GraphError,
    GridCapError,
    ParameterError,
    ValidationError,
)
from eesim.graph import (
    ModelProfile,
    RampBudget,
    RampSite,
    find_feasible_sites,
    initial_placement,
    load_profile,
)
from eesim.trace import RequestRecord, Workload, load_workload, save_workload, synthesize_workload

__all__ = [
    "EEConfig",
    "EESimError",
    "ExitOutcome",
    "GraphError",
    "GridCapError",
    "ModelProfile",
    "ParameterError",
    "RampBudget",
    "RampSite",
    "RequestRecord",
    "ValidationError",
    "Workload",
    "evaluate_record",
    "evaluate_window",
    "find_feasible_sites",
    "initial_placement",
    "load_profile",
    "load_workload",
    "optimal_exit",
    "save_workload",
    "synthesize_workload",
]

"""Queueing analytics, autoscalers and a discrete-event simulator for layered service graphs."""

from .errors import (AnalyticError, ElastiqError, EstimationError, SimulationError, TopologyError,
                     ValidationError, WorkloadError)

__version__ = "0.1.0"

__all__ = [
    "AnalyticError", "ElastiqError", "EstimationError", "SimulationError", "TopologyError",
    "ValidationError", "WorkloadError", "__version__",
]

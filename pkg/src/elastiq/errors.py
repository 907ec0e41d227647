"""Exception types shared across the package."""


class ElastiqError(Exception):
    """Base class for all package errors."""


class ValidationError(ElastiqError, ValueError):
    """Input violates a documented precondition."""


class TopologyError(ElastiqError):
    """Routing structure is unusable (cycles, dangling classes)."""


class AnalyticError(ElastiqError):
    """An analytic quantity does not exist for the given inputs."""


class EstimationError(ElastiqError):
    """Not enough observations to produce an estimate."""


class WorkloadError(ElastiqError):
    """Arrival source cannot be turned into a usable stream."""


class SimulationError(ElastiqError):
    """Internal consistency failure inside the event loop."""

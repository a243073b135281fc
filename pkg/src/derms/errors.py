"""Exception hierarchy shared by every module.

Each class carries a short ``category`` string. The CLI prints it verbatim so
failures stay machine-parseable.
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from derms.sim import Trajectory


class DermsError(Exception):
    """Base class for all errors raised by derms."""

    category = "error"


class ConfigError(DermsError, ValueError):
    """A scenario, network or instance file could not be parsed or validated."""

    category = "config"


class OverrideError(ConfigError):
    """A ``--set key=value`` override names a key that does not exist."""

    category = "override"


class TopologyError(DermsError, ValueError):
    """The line graph is not a tree rooted at the feeder head."""

    category = "topology"


class ParameterError(DermsError, ValueError):
    """A numeric parameter is outside its allowed range."""

    category = "parameter"


class SingularLinearizationError(DermsError):
    """The power-flow Jacobian at the linearization point cannot be inverted."""

    category = "linearization"


class MeasurementError(DermsError, KeyError):
    """A measurement id is unknown or a measurement vector is incomplete."""

    category = "measurement"

    def __str__(self) -> str:
        # KeyError quotes its argument; keep plain text
        return Exception.__str__(self)


class HorizonError(DermsError, ValueError):
    """A time lies outside the scenario horizon."""

    category = "horizon"


class InvariantError(DermsError):
    """A per-tick invariant check failed during a run."""

    category = "invariant"


class SimulationError(DermsError):
    """The plant failed during a run. Carries the trajectory recorded so far."""

    category = "simulation"

    def __init__(self, message: str, trajectory: "Trajectory | None" = None):
        super().__init__(message)
        self.trajectory = trajectory


class OracleError(DermsError):
    """The central solver did not converge."""

    category = "oracle"

    def __init__(self, message: str, iterations: int = 0, residual: Any = None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class CompareError(DermsError):
    """Two run reports cannot be compared."""

    category = "compare"

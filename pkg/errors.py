"""
Exception hierarchy and warning categories shared by every module.

Errors map onto the command-line exit codes in config.py: parse problems
exit with 1, invariant violations with 2, numerical failures with 3.
"""

from typing import List, Tuple


class KdeAsHmmError(Exception):
    """Base class for all toolkit errors."""


class DataParseError(KdeAsHmmError, ValueError):
    """Input file or document could not be parsed."""


class ModelFormatError(DataParseError):
    """Model / spec document is malformed or carries an unknown format version."""


class InvariantError(KdeAsHmmError, ValueError):
    """A structural or probabilistic invariant does not hold."""


class GraphCycleError(InvariantError):
    """A per-state dependency graph contains a directed cycle."""

    def __init__(self, cycles: List[Tuple[int, List[int]]]):
        self.cycles = cycles
        parts = [f"state {state}: {' -> '.join(str(v) for v in nodes)}" for state, nodes in cycles]
        super().__init__("Cyclic dependency graph (" + "; ".join(parts) + ")")


class NumericalError(KdeAsHmmError, ArithmeticError):
    """Numerical failure during inference or training."""


class DegenerateModelError(NumericalError):
    """Model cannot assign positive probability to the data."""


class StateStarvationError(NumericalError):
    """A hidden state received zero posterior mass."""

    def __init__(self, state: int):
        self.state = state
        super().__init__(f"State {state} received no posterior mass (sum of gamma is zero)")


class NonMonotoneError(NumericalError):
    """An exact EM step decreased the training log-likelihood."""


class KdeAsHmmWarning(UserWarning):
    """Base class for numerical warnings."""


class DegenerateFeatureWarning(KdeAsHmmWarning):
    """A feature has zero sample variance."""


class BandwidthFloorWarning(KdeAsHmmWarning):
    """A bandwidth update fell below the floor and was clamped."""


class RidgeFallbackWarning(KdeAsHmmWarning):
    """Normal equations were singular; a ridge term was added."""


class LocalMaximumWarning(KdeAsHmmWarning):
    """Bandwidth update does not satisfy the local-maximum condition."""


class StateStarvationWarning(KdeAsHmmWarning):
    """A starved state was reset."""


class ZeroEmissionWarning(KdeAsHmmWarning):
    """Every mixture term of an emission density is zero."""

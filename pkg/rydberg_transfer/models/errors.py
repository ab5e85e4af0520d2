"""
Exception hierarchy for the simulator.
"""

from typing import Optional


class RydbergError(Exception):
    """Base class for errors raised on purpose by this package."""


class InvalidParameterError(RydbergError, ValueError):
    """A precondition on an input value is violated."""


class ConfigError(RydbergError, ValueError):
    """A run configuration cannot be read or validated."""


class NormDriftError(RydbergError, RuntimeError):
    """Propagation lost unitarity beyond the abort threshold."""

    def __init__(self, drift: float, time: float, index: int):
        super().__init__(
            f"norm drift {drift:.3e} at t={time:.6e} s (sample {index}) exceeds abort threshold"
        )
        self.drift = drift
        self.time = time
        self.index = index


class FitError(RydbergError, RuntimeError):
    """A fit could not be attempted on the supplied data."""


class OptimizationError(RydbergError, RuntimeError):
    """An optimizer failed; `step` names the protocol step when there is one."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step

"""Exception types shared across the package.

Domain failures get their own classes so callers can route them (CLI exit
codes, HTTP error payloads). Programmer errors keep the builtin types
(ValueError, KeyError, IndexError).
"""


class VolnavError(Exception):
    """Base class for all domain errors raised by this package."""


class MalformedInputError(VolnavError):
    """Input file or payload violates the documented on-disk/wire format."""


class ConfigurationError(VolnavError):
    """A configuration value is invalid or inconsistent with the data."""


class DegenerateDirectionError(VolnavError):
    """A view direction could not be formed (target coincides with eye)."""


class DegenerateOrientationError(VolnavError):
    """A quaternion update collapsed to (numerically) zero norm."""


class NumericError(VolnavError):
    """A numeric invariant broke (non-finite values, zero-norm vectors)."""


class TransportError(VolnavError):
    """An external service could not be reached or answered garbage."""

    def __init__(self, message: str, *, retries_exhausted: bool = False):
        super().__init__(message)
        self.retries_exhausted = retries_exhausted


class TrainingError(VolnavError):
    """Training diverged; carries the last good checkpoint when available."""

    def __init__(self, message: str, *, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class StageMissingError(VolnavError):
    """A pipeline stage's input artifact is missing; names the fix."""

    def __init__(self, message: str, *, run_first: str):
        super().__init__(f"{message} (run `{run_first}` first)")
        self.run_first = run_first

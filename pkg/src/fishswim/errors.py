"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed input data (traces, logs, checkpoints)."""


class NumericFault(RuntimeError):
    """Solver produced NaN/Inf, non-positive density, or broke the low-Mach bound.

    Carries the first offending cell when known.
    """

    def __init__(self, message, cell=None):
        if cell is not None:
            message = f"{message} (first offending cell {cell})"
        super().__init__(message)
        self.cell = cell


class OutOfDomainFault(RuntimeError):
    """A body marker left the valid fluid region (fish left the pool)."""


class CheckpointError(DataError):
    """Checkpoint file unreadable or inconsistent with the current config."""

"""Exception types shared across the package.

Each maps to a process exit code in the CLI: ConfigError -> 2,
DataError -> 3, NumericError -> 4.  Everything else is a plain bug.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Malformed or out-of-range input data (e.g. a trip CSV)."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


class ConstraintViolation(ValueError):
    """An action referenced a worker or order it is not allowed to use."""


class InfeasibleInsertion(ValueError):
    """Reward was requested for an insertion that has no feasible route."""


class DeterminismError(RuntimeError):
    """A computation that must be repeatable produced differing results."""

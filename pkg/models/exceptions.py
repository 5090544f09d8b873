"""Exception hierarchy shared by every package.

The CLI maps these to exit codes (see ``app.py``).
"""

from __future__ import annotations

from pathlib import Path


class SlamError(Exception):
    """Base class for all errors raised by this project."""


class ContractViolationError(SlamError, ValueError):
    """A caller broke a shape or ordering contract (dimension mismatch, stale cache)."""


class NonFiniteGradientError(SlamError, ArithmeticError):
    """A gradient handed to the optimizer contains NaN or inf."""


class OutOfDomainError(SlamError, ValueError):
    """A query point lies outside the box a grid or field is defined on."""


class ConfigurationError(SlamError, ValueError):
    """Invalid configuration values (degenerate intrinsics, unknown config keys...)."""


class EmptyStaticSetError(SlamError):
    """No static pixel with valid depth is available for sampling."""


class InsufficientDataError(SlamError, ValueError):
    """Not enough samples to compute a statistic (e.g. fewer than 3 common frames)."""


class NumericalFailureError(SlamError, ArithmeticError):
    """A loss or state became non-finite during a run."""


class DatasetError(SlamError):
    """A dataset file is missing or corrupt.

    Args:
        path: File that failed to load
        message: What went wrong
    """

    def __init__(self, path: str | Path, message: str):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")

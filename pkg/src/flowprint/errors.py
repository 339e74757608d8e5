"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FlowprintError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FlowprintError, ValueError):
    """Invalid scenario, network or simulator configuration."""


class DataError(FlowprintError, ValueError):
    """Malformed input data (relay sets, traces, traffic models)."""


class UndefinedCorrelationError(FlowprintError, ValueError):
    """Correlation requested for a series with zero variance."""


class DegenerateInputError(FlowprintError, ValueError):
    """Statistic is undefined for the given arguments."""


class TruncatedTraceError(FlowprintError):
    """A circuit was torn down before the requested window completed.

    The partial trace collected so far is kept on ``partial``.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial

"""Shared exception types."""


class PrerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PrerError):
    """Bad wiring: shape mismatches, unknown names, invalid config values."""


class StateError(PrerError):
    """Operation invoked out of order, e.g. backward before forward or
    eval-mode batch norm before any statistics exist."""


class DivergenceError(PrerError):
    """Training produced non-finite values."""

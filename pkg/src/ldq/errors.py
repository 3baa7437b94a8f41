"""Exception types shared across the package.

The command-line front end maps each class to its own exit status.
"""

from __future__ import annotations


class LdqError(Exception):
    """Base class for all package errors."""

    reason = "error"


class ConfigError(LdqError):
    """Malformed or missing configuration input."""

    reason = "config"


class ValidationError(LdqError, ValueError):
    """An input violates a documented invariant.

    ``invariant`` names the violated condition in machine-readable form.
    """

    reason = "validation"

    def __init__(self, message: str, invariant: str = "unspecified"):
        super().__init__(message)
        self.invariant = invariant


class NumericError(LdqError, ArithmeticError):
    """A numerical procedure failed to converge or a cross-check disagreed."""

    reason = "numeric"

    def __init__(self, message: str, gap: float | None = None):
        super().__init__(message)
        self.gap = gap

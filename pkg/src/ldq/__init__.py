"""Flows, reflection maps and large-deviation rates for feedback queueing networks."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import ConfigError, LdqError, NumericError, ValidationError

__all__ = ["__version__", "LdqError", "ConfigError", "ValidationError", "NumericError"]

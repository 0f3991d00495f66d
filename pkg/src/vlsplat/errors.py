"""Exception hierarchy shared across the engine.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the classes below rather than raising bare builtins.
"""
from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(EngineError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class InvalidStateError(EngineError, RuntimeError):
    """Internal objects are inconsistent, e.g. a backward pass fed with
    auxiliary buffers from a different forward pass."""


class DataError(EngineError):
    """On-disk data is missing, malformed, truncated, or inconsistent."""


class NumericError(EngineError):
    """A numeric invariant failed at runtime (non-finite loss, etc.)."""

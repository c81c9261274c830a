"""Exception types raised across highway-lab.

Each subclasses the closest built-in so callers can catch either.
"""

from __future__ import annotations


class ShapeError(ValueError):
    """Shape/data mismatch. Messages name the primitive and the offending shapes."""


class TensorError(ValueError):
    """A tensor invariant was violated at construction."""


class TapeError(RuntimeError):
    """The tape was used out of order (no active tape, backward before forward, ...)."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared in a gradient or a training loss."""

    def __init__(self, message: str, *, node_id: int | None = None,
                 op_kind: str | None = None, step: int | None = None):
        super().__init__(message)
        self.node_id = node_id
        self.op_kind = op_kind
        self.step = step


class NonDeterministicError(RuntimeError):
    """Two evaluations of the same model function disagreed."""


class HookError(RuntimeError):
    """A tap hook tried to alter the l-stream in a non-inserting mode."""


class ConfigError(ValueError):
    """Invalid experiment, backbone or method configuration."""


class ReportExistsError(FileExistsError):
    """A report file already exists and --force was not given."""

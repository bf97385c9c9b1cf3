"""minisched: a small scheduling language whose compiler writes its own
verification annotations, plus a concrete-execution checker for them."""

from __future__ import annotations

from .ir import (
    EncodeError,
    ParseError,
    Pipeline,
    PipelineError,
    ScheduleError,
    ValidationError,
    hdiv,
    hmod,
)

__all__ = [
    "EncodeError",
    "ParseError",
    "Pipeline",
    "PipelineError",
    "ScheduleError",
    "ValidationError",
    "hdiv",
    "hmod",
]

__version__ = "0.1.0"

"""
Exception hierarchy for mcdnet.
Library code raises these; only the CLI turns them into exit codes.
"""
from __future__ import annotations

from typing import Iterable


class McdNetError(Exception):
    """Root of every error raised by mcdnet."""


class ShapeError(McdNetError, ValueError):
    """Tensor shapes or operator arguments do not fit together."""


class GraphError(McdNetError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar backward, consumed graph)."""


class NonFiniteError(McdNetError, FloatingPointError):
    """An operator produced NaN/Inf while checked mode was on."""


class ConfigError(McdNetError, ValueError):
    """Invalid or unreadable run configuration."""


class DataError(McdNetError, ValueError):
    """Dataset files, manifests or samples that break the data contract."""


class DivergenceError(McdNetError, RuntimeError):
    """Training loss became non-finite."""


class CheckpointError(McdNetError):
    """Malformed checkpoint file."""


class CheckpointTruncatedError(CheckpointError):
    """Index points past the end of the payload region."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint tensors do not match the model registry."""

    def __init__(self, missing: Iterable[str] = (), unexpected: Iterable[str] = (), mismatched: Iterable[str] = ()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        self.mismatched = sorted(mismatched)
        parts = []
        if self.missing:
            parts.append("missing tensors: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected tensors: " + ", ".join(self.unexpected))
        if self.mismatched:
            parts.append("shape mismatch: " + ", ".join(self.mismatched))
        super().__init__("; ".join(parts) or "checkpoint does not match model")

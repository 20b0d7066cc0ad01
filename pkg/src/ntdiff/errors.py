from __future__ import annotations


class NTDiffError(Exception):
    """Base class for package errors."""


class ConfigError(NTDiffError, ValueError):
    """Bad configuration or command-line usage."""


class DataError(NTDiffError, ValueError):
    """Input data is missing, malformed, or unusable."""


class CheckpointError(NTDiffError, RuntimeError):
    """A checkpoint is missing, incomplete, or does not match the run."""


class NonFiniteLossError(NTDiffError, FloatingPointError):
    """Training produced a NaN or Inf loss."""

    def __init__(self, message: str, metadata: dict | None = None) -> None:
        super().__init__(message)
        self.metadata = metadata or {}

"""Exception types shared across the package."""


class SmlpError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SmlpError):
    """Invalid configuration, CLI usage, or synthetic-table spec."""


class FormatError(SmlpError):
    """Malformed, truncated, or corrupted table/model file."""


class DigestMismatchError(SmlpError):
    """Model and table provenance digests disagree."""


class TrainingDivergedError(SmlpError):
    """SGD produced non-finite loss or weights."""


class ArchitectureExhausted(SmlpError):
    """Architecture growth hit the configured width cap."""


class TrainingAborted(SmlpError):
    """A training job failed; carries the records completed so far."""

    def __init__(self, message, completed_records=()):
        super().__init__(message)
        self.completed_records = list(completed_records)

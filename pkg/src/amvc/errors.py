"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AmvcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AmvcError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(AmvcError):
    """A configuration value is invalid or inconsistent."""


class GraphError(AmvcError):
    """A gradient-tape contract was violated (non-scalar loss, detached loss,
    or a tape that was already consumed)."""


class DataFormatError(AmvcError):
    """Base class for on-disk format problems (clips, checkpoints, manifests)."""


class MagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(DataFormatError):
    """File format version is not supported."""


class TruncatedError(DataFormatError):
    """File ends before the declared payload is complete."""


class ChecksumError(DataFormatError):
    """Stored CRC32 does not match the payload."""


class NoConfidentSamples(AmvcError):
    """Every pseudo-label in the batch fell below the confidence threshold."""


class DivergenceError(AmvcError):
    """A training loss became non-finite.

    Carries enough context to locate the offending step: the phase, the
    global step index and the batch ordinal within the epoch.
    """

    def __init__(self, message: str, *, phase: str, step: int, batch_index: int):
        super().__init__(message)
        self.phase = phase
        self.step = step
        self.batch_index = batch_index

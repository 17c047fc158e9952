"""Typed errors shared across the toolkit.

Every failure mode callers are expected to handle has its own class so the
CLI can map them onto stable exit codes.
"""


class UnlearnkitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(UnlearnkitError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(UnlearnkitError):
    """Invalid configuration value, selector, or argument."""


class StateError(UnlearnkitError):
    """Operation called in the wrong lifecycle state."""


class FormatError(UnlearnkitError):
    """A file does not match its declared binary format."""


class IntegrityError(UnlearnkitError):
    """A file parses but its contents are internally inconsistent."""


class NumericError(UnlearnkitError):
    """A computation produced non-finite values."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries where it happened."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch

"""Exception types shared across the kit. The CLI maps them to exit codes."""

from .tensor import ShapeError, TapeError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """Malformed file contents (bad magic, bad header, wrong maxval)."""


class IntegrityError(FormatError):
    """Truncated or corrupted file."""


class LabelError(ValueError):
    """Ground-truth values outside {0, 1}."""


class NumericError(FloatingPointError):
    """Non-finite loss or parameters during training."""


__all__ = [
    "ConfigError",
    "FormatError",
    "IntegrityError",
    "LabelError",
    "NumericError",
    "ShapeError",
    "TapeError",
]

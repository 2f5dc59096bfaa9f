"""Exception types shared across the package.

Each error carries an ``exit_code`` so the command-line front end can map
failures to distinct process exit statuses.
"""

from .tensor import ContractError, DimensionError


class SwtrError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(SwtrError, ValueError):
    exit_code = 4
    kind = "config"


class DegenerateInputError(SwtrError, ValueError):
    exit_code = 6
    kind = "degenerate_input"


class UndefinedMetricError(SwtrError, ValueError):
    exit_code = 6
    kind = "undefined_metric"


class GenerationError(SwtrError, RuntimeError):
    exit_code = 6
    kind = "generation"


class TrainingError(SwtrError, RuntimeError):
    exit_code = 7
    kind = "training"


class FormatError(SwtrError, ValueError):
    """Base class for malformed weight or volume files."""

    exit_code = 5
    kind = "format"


class MagicError(FormatError):
    exit_code = 10
    kind = "bad_magic"


class VersionError(FormatError):
    exit_code = 11
    kind = "bad_version"


class LengthError(FormatError):
    exit_code = 12
    kind = "bad_length"


class ChecksumError(FormatError):
    exit_code = 13
    kind = "bad_checksum"


class TensorNameError(FormatError):
    exit_code = 14
    kind = "tensor_names"


__all__ = [
    "SwtrError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DegenerateInputError",
    "UndefinedMetricError",
    "GenerationError",
    "TrainingError",
    "FormatError",
    "MagicError",
    "VersionError",
    "LengthError",
    "ChecksumError",
    "TensorNameError",
]

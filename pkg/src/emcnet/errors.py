"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit
with 2, numeric failures (NaN gradients, degenerate inputs) with 3.
"""


class EMCNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EMCNetError):
    """Shape or axis mismatch between operands."""


class EmptyInputError(EMCNetError):
    """Zero-extent data where at least one element is required."""


class NumericError(EMCNetError):
    """NaN inputs, diverged gradients, or other numeric degeneracies."""


class TapeError(EMCNetError):
    """Misuse of the autodiff tape (double backward, foreign tensors...)."""


class TokenizationError(EMCNetError):
    """Image dimensions incompatible with the requested patch size."""


class ImageFormatError(EMCNetError):
    """Unreadable or unsupported image file."""


class CheckpointError(EMCNetError):
    """Malformed checkpoint file or checkpoint/config mismatch."""


class ConfigError(EMCNetError):
    """Invalid run configuration."""

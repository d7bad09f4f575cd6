"""
Exception types shared by every module.

Each error also derives from the builtin raised for the same situation
elsewhere, so callers catching ValueError/KeyError keep working.
"""


class RegformerError(Exception):
    """Base class for all errors raised by this project."""


class ShapeError(RegformerError, ValueError):
    """Operand shapes do not line up."""


class ConfigError(RegformerError, ValueError):
    """Invalid configuration value or combination."""


class EmptyLossError(RegformerError, ValueError):
    """Every position of a loss computation was ignored."""


class LengthError(RegformerError, ValueError):
    """A sequence is longer than the model supports."""


class UnsupportedVariantError(RegformerError, ValueError):
    """Operation is not defined for the requested model variant."""


class NonFiniteError(RegformerError, FloatingPointError):
    """A NaN or infinity showed up in a loss or gradient."""


class CheckpointError(RegformerError):
    """Checkpoint file is malformed, of an unknown version, or mismatched."""


class UnknownLanguageError(RegformerError, KeyError):
    """Language id is not part of the vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown language"

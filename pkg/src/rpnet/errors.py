"""Exception types shared across the package.

The CLI maps each family onto its own exit code.
"""


class RPNetError(Exception):
    """Base class for errors raised by rpnet."""


class SizeMismatchError(RPNetError, ValueError):
    """A tensor or image does not have the size an operation requires."""


class ConfigError(RPNetError, ValueError):
    """A run configuration is malformed or references unknown keys."""


class DataError(RPNetError):
    """A dataset file is missing, unreadable or carries unknown labels."""


class DivergenceError(RPNetError):
    """Training produced a non-finite loss."""

    def __init__(self, stage, iteration, losses):
        self.stage = stage
        self.iteration = iteration
        self.losses = losses
        super().__init__(
            f"non-finite loss at stage {stage}, iteration {iteration}: {losses}"
        )

"""Exception types shared across the package."""


class PromptSegError(Exception):
    """Base class for all promptseg errors."""


class InvalidArgumentError(PromptSegError, ValueError):
    """An operation received arguments violating its preconditions."""


class InvalidConfigError(PromptSegError, ValueError):
    """An experiment configuration failed validation."""


class NumericError(PromptSegError, ArithmeticError):
    """A numeric contract was violated (non-finite values, zero norms, ...)."""


class TrainingFailureError(PromptSegError, RuntimeError):
    """Training diverged or otherwise failed; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnlabeledAccessError(PromptSegError):
    """A mask was read for a sample that has not been labeled."""


class CheckpointError(PromptSegError):
    """Checkpoint load/save contract violation."""

"""Exception hierarchy shared by every module."""


class OptformerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OptformerError, ValueError):
    pass


class DimensionError(OptformerError, ValueError):
    pass


class ValidationError(OptformerError, ValueError):
    pass


class ContractError(OptformerError, ValueError):
    """Auxiliary streams do not match what a block variant requires."""


class NumericError(OptformerError, ArithmeticError):
    """A NaN/Inf appeared, or an iteration diverged."""


class SizeGuardError(OptformerError):
    """A dense diagnostic would exceed its size budget."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None, record=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.record = record

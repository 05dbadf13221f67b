"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid counts, ranges or incompatible component pairings."""


class ContractViolation(ValueError):
    """An input violated an operation's precondition (shape, simplex, ...)."""


class SupportError(ZeroDivisionError):
    """A logged record has zero logging (cluster) propensity."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (record {index})")
        self.index = index


class NumericError(FloatingPointError):
    """Non-finite values reached an optimizer step."""


class UnsupportedModeError(ValueError):
    """Operation needs a discrete-context environment."""


class FallbackNeeded(ValueError):
    """Pairwise regression cannot run; use conventional regression instead."""

"""Exception types shared across the package."""


class SpikedetError(Exception):
    """Base class for every error raised by spikedet."""


class ContractViolation(SpikedetError, ValueError):
    """An argument broke an operation's precondition (shapes, sizes, signs)."""


class NumericInputError(SpikedetError, ValueError):
    """NaN or infinite values reached an operation that requires finite input."""


class ConfigurationError(SpikedetError, ValueError):
    """Incompatible or invalid configuration (layer shapes, K mismatch, ...)."""


class StateError(SpikedetError, RuntimeError):
    """An operation was called before the state it depends on exists."""


class GenerationError(SpikedetError, RuntimeError):
    """Scene generation could not satisfy its placement constraints."""

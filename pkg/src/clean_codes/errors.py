"""
Error types raised across Clean Codes.
"""


class CleanCodesError(Exception):
    """Base class for all errors raised by the package."""


class InvalidArgumentError(CleanCodesError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateInputError(CleanCodesError, ValueError):
    """Input signal is silent or otherwise makes the quantity undefined."""


class InvalidStateError(CleanCodesError, RuntimeError):
    """The object or pipeline is not in a state that allows the operation."""


class InfeasibleTargetError(CleanCodesError, ValueError):
    """A CTC target cannot be aligned within the available frames."""


class UnsupportedAudioError(CleanCodesError, ValueError):
    """A wav file uses an encoding the corpus loader does not accept."""

"""
Clean Codes - noise-robust speech recognition with a clean-speech codebook prior.
"""

__version__ = "0.1.0"

from .config import CleanCodesConfig
from .errors import (CleanCodesError, DegenerateInputError, InfeasibleTargetError, InvalidArgumentError,
                     InvalidStateError, UnsupportedAudioError)

__all__ = [
    "CleanCodesConfig",
    "CleanCodesError",
    "DegenerateInputError",
    "InfeasibleTargetError",
    "InvalidArgumentError",
    "InvalidStateError",
    "UnsupportedAudioError",
]

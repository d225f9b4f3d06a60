"""keyforge: recover a pin-tumbler key's bitting from an image and build a printable model."""

from .bitting import BitMask, BittingCode, DepthChart, KeySpec
from .errors import KeyforgeError, StageFailure
from .geometry import PerspectiveParams

__version__ = "0.1.0"

__all__ = ["BitMask", "BittingCode", "DepthChart", "KeySpec", "KeyforgeError", "PerspectiveParams", "StageFailure"]

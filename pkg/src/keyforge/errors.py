"""Exception types raised across keyforge.

Every failure the library can report is a subclass of :class:`KeyforgeError`
so callers (the CLI in particular) can catch one base class.
"""


class KeyforgeError(Exception):
    """Base class for all keyforge errors."""


# geometry
class DegenerateCorrespondences(KeyforgeError):
    pass


class PointAtInfinity(KeyforgeError):
    pass


class NonInvertibleTransform(KeyforgeError):
    pass


# masks / bitting
class EmptyMask(KeyforgeError):
    pass


class MultipleComponents(KeyforgeError):
    pass


class NoForeground(KeyforgeError):
    pass


class DegenerateBlade(KeyforgeError):
    pass


class RayMiss(KeyforgeError):
    def __init__(self, pin: int):
        super().__init__(f"virtual pin {pin} found no key material")
        self.pin = pin


class OutOfFrame(KeyforgeError):
    pass


class LengthMismatch(KeyforgeError):
    pass


class MacsViolation(KeyforgeError):
    pass


class InvalidKeySpec(KeyforgeError):
    pass


# model3d
class ClipNotSimple(KeyforgeError):
    pass


class NoOverlap(KeyforgeError):
    pass


class EmptyMesh(KeyforgeError):
    pass


class IoFailure(KeyforgeError):
    pass


class ProfileExceedsKeyway(UserWarning):
    """Warning: a bitting height above the keyway top was clamped."""


# synth
class KeyOutOfFrame(KeyforgeError):
    pass


class AugmentationClipsKey(KeyforgeError):
    pass


# metrics
class DimensionMismatch(KeyforgeError):
    pass


class EmptyPrediction(KeyforgeError):
    pass


class NoGroundTruth(KeyforgeError):
    pass


class SingleClass(KeyforgeError):
    pass


# pipeline
class ManifestParse(KeyforgeError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyDataset(KeyforgeError):
    pass


class StageFailure(KeyforgeError):
    """A pipeline stage failed; ``stage`` is one of the tags in ``STAGES``."""

    STAGES = ("DetectFail", "WarpFail", "SegmentFail", "DecodeFail", "MacsFail", "MeshFail")

    def __init__(self, stage: str, cause: BaseException | str):
        if stage not in self.STAGES:
            raise ValueError(f"unknown stage tag {stage!r}")
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause

"""Exception types raised across the library.

Everything inherits from T3DError so callers can catch library failures
in one clause; the CLI maps subclasses onto its exit codes.
"""


class T3DError(Exception):
    """Base class for all library errors."""


class ConfigError(T3DError):
    """Invalid, unknown, or out-of-range configuration value."""


class InvalidWindowError(T3DError):
    """Intensity window with lo >= hi."""


class InvalidSpacingError(T3DError):
    """Non-positive voxel spacing."""


class InvalidDimsError(T3DError):
    """Volume dimensions that are zero or negative."""


class CropTooLargeError(T3DError):
    """Requested crop exceeds the volume on at least one axis."""


class PhantomSpecError(T3DError):
    """Phantom spec that cannot produce a valid sample."""


class VolumeFormatError(T3DError):
    """Malformed volume file; `field` names the offending header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ShapeError(T3DError):
    """Array arguments with incompatible shapes."""


class PreconditionError(T3DError):
    """Call that violates a documented precondition."""


class VocabError(T3DError):
    """Token id outside the vocabulary, or an unusable vocabulary."""


class DegenerateNormError(T3DError):
    """Attempt to L2-normalize a (near-)zero vector."""


class DegenerateAttentionError(T3DError):
    """Attention over an all-masked key set."""


class NonFiniteLossError(T3DError):
    """Loss evaluation produced NaN or infinity."""


class DivergedRunError(T3DError):
    """Non-finite loss encountered at `step`."""

    def __init__(self, step: int, message: str = ""):
        super().__init__(message or f"non-finite loss at step {step}")
        self.step = step


class RefuseToResumeError(T3DError):
    """Checkpoint config fingerprint does not match the requested config."""


class DegenerateLabelsError(T3DError):
    """Single-class training labels; `attribute` names the offender."""

    def __init__(self, attribute: str):
        super().__init__(f"attribute {attribute!r} has single-class training labels")
        self.attribute = attribute


class PromptError(T3DError):
    """Prompt that does not tokenize to a usable sequence."""

"""Exception hierarchy shared across the toolkit.

Every error that can cross the CLI boundary maps onto one of three exit
codes: usage (2), data (3), numeric divergence (4). Library code raises the
specific subclass; the CLI translates.
"""


class HmtError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class InvalidInputError(HmtError):
    """Non-finite or otherwise malformed numeric input."""


class InvalidRotationError(HmtError):
    """Matrix fails orthonormality / determinant checks beyond tolerance."""


class DegenerateRot6DError(HmtError):
    """6D rotation input cannot be orthonormalized (near-zero or parallel)."""


class EncodeError(HmtError):
    """Feature encoding inputs inconsistent with the requested variant."""


class DecodeError(HmtError):
    """Feature decoding failed; carries frame/joint location when known."""

    def __init__(self, msg, frame=None, joint=None):
        super().__init__(msg)
        self.frame = frame
        self.joint = joint


class FitDivergedError(HmtError):
    """Pose fitting residual exploded; carries diagnostics."""

    exit_code = 4

    def __init__(self, msg, initial_residual=None, final_residual=None, iterations=None):
        super().__init__(msg)
        self.initial_residual = initial_residual
        self.final_residual = final_residual
        self.iterations = iterations


class ConfigError(HmtError):
    """Quantizer/tokenizer configuration violates an invariant."""


class UninitializedCodebookError(HmtError):
    """Quantization requested before codebooks were seeded."""


class InvalidTokenError(HmtError):
    """Token id out of range; carries the offending stream position."""

    def __init__(self, msg, position=None):
        super().__init__(msg)
        self.position = position


class WindowingError(HmtError):
    """Pose sequence does not tile into whole one-second windows."""


class MalformedBlockError(HmtError):
    """Token block is incomplete or structurally wrong."""


class TrainingDivergedError(HmtError):
    """Loss became non-finite during tokenizer training."""

    exit_code = 4


class BehindCameraError(HmtError):
    """Point with non-positive depth cannot be projected."""


class AugmentRangeError(HmtError):
    """Augmentation parameter outside the configured plausible range."""


class ModeError(HmtError):
    """Decoding-state operation called in an incompatible mode."""


class SerializationError(HmtError):
    """Motion tokens cannot be serialized (partial block, bad ids)."""


class DegenerateFrameError(HmtError):
    """All joints coincide; similarity alignment is undefined."""


class IngestError(HmtError):
    """Record file violates the schema; carries the field path."""

    def __init__(self, msg, field=None):
        super().__init__(msg)
        self.field = field


class BalanceError(HmtError):
    """Corpus balancing targets are infeasible."""


class UsageError(HmtError):
    """Bad command-line arguments or option combinations."""

    exit_code = 2

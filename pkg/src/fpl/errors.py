"""Exception hierarchy for the fpl package.

Every error raised on bad data or bad usage derives from FplError so
callers (and the CLI) can distinguish data problems from genuine bugs.
"""


class FplError(Exception):
    """Base class for all fpl data and usage errors."""


class ShapeMismatch(FplError):
    """Array dimensions disagree with what the operation requires."""


class NonFiniteInput(FplError):
    """External input contained NaN or Inf entries."""


class NotPositiveDefinite(FplError):
    """A symmetric solve hit a non-positive pivot.

    Usually means the ridge term is too small for a rank-deficient
    Gram matrix, or the input is corrupt.
    """


class ZeroVector(FplError):
    """Cosine similarity requested for a vector with (near-)zero norm."""


class NegativeEta(FplError):
    """Fusion weight must be >= 0."""


class LabelOutOfRange(FplError):
    """Class label does not index a valid class."""


class DegenerateReconstruction(FplError):
    """A reconstructed feature map has near-zero norm; cosine undefined."""


class EmptyBatch(FplError):
    """A loss or training step was requested on an empty batch."""


class EmptyClass(FplError):
    """A class has no support feature maps."""


class StepOutOfRange(FplError):
    """Schedule step index outside [0, total_steps)."""


class BadMagic(FplError):
    """Feature-pack file does not start with the FPK1 magic bytes."""


class UnsupportedVersion(FplError):
    """Feature-pack file declares a version this reader cannot handle."""


class TruncatedFile(FplError):
    """Feature-pack file is shorter than its manifest promises."""


class ManifestMismatch(FplError):
    """Feature-pack manifest disagrees with the stored blobs."""


class NoTestSplit(FplError):
    """Evaluation requested on a pack with no test-split queries."""

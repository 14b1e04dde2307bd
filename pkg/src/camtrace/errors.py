"""Exception types shared across the pipeline stages."""


class CamtraceError(Exception):
    """Base class for all pipeline errors."""


class UnsupportedFormat(CamtraceError):
    """Input file is not an RGB PNG or baseline JPEG."""


class CorruptStream(CamtraceError):
    """Image stream is truncated or has invalid markers."""


class OutOfBounds(CamtraceError):
    """Patch reference exceeds the source image bounds."""


class ImageTooSmall(CamtraceError):
    """Image cannot fit a single patch of the requested size."""


class PlaneTooSmall(CamtraceError):
    """Decomposition requires at least a 3x3 plane."""


class DegenerateGeometry(CamtraceError):
    """RBF centers are duplicated or collinear."""


class SingularSystem(CamtraceError):
    """The interpolation system could not be solved to tolerance."""


class OutputTooSmall(CamtraceError):
    """Resampling would produce an image with a zero dimension."""


class ShapeMismatch(CamtraceError):
    """Tensor operands have incompatible shapes."""


class NonScalarLoss(CamtraceError):
    """backward() requires a scalar loss tensor."""


class InvalidConfig(CamtraceError):
    """Network or phase configuration violates its invariants."""


class BadPatchSize(CamtraceError):
    """Patch spatial size is not one of the supported sizes."""


class WeightStoreError(CamtraceError):
    """Weight container is malformed or its config digest mismatches."""


class EmptyManifest(CamtraceError):
    """Operation requires a non-empty manifest."""


class ClassImbalance(CamtraceError):
    """Class counts differ by more than the allowed balance tolerance."""


class DivergedLoss(CamtraceError):
    """Training loss became non-finite."""


class MissingPrediction(CamtraceError):
    """Prediction set does not cover every manifest entry."""


class InvalidSpec(CamtraceError):
    """Synthetic camera specification is invalid."""

"""Exception hierarchy shared by all modules.

Two families matter to callers: ``ValidationError`` (bad arguments, geometry
that cannot be solved) and ``InputFileError`` (a file that does not parse).
The CLI maps the first to exit code 1 and the second to exit code 2.
"""


class RoverStereoError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RoverStereoError, ValueError):
    pass


class InputFileError(RoverStereoError):
    pass


# camgeo
class PointBehindCamera(ValidationError):
    pass


class DegenerateRay(ValidationError):
    pass


class RankDeficient(ValidationError):
    pass


class NegativeDepth(ValidationError):
    pass


class InvalidFov(ValidationError):
    pass


class InvalidCamera(ValidationError):
    pass


# synthgen
class EmptyFrustumIntersection(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


# tinynet
class ShapeMismatch(ValidationError):
    pass


class DivergedLoss(RoverStereoError):
    pass


class CorruptWeights(InputFileError):
    pass


# imageproc
class ImageTooSmall(ValidationError):
    pass


class BadMagic(InputFileError):
    pass


class BadDimensions(InputFileError):
    pass


class Truncated(InputFileError):
    pass


# features
class EmptyRoi(ValidationError):
    pass


class DescriptorLengthMismatch(ValidationError):
    pass


class BadHeader(InputFileError):
    pass


class RaggedRow(InputFileError):
    pass


# objpipe
class MalformedLine(InputFileError):
    pass


class UnknownClassId(InputFileError):
    pass


class OutOfRangeCoordinate(InputFileError):
    pass


class IoFailure(InputFileError):
    pass


# recon
class DimensionMismatch(InputFileError):
    pass


class NoValidAnchors(ValidationError):
    pass


class DegenerateFit(ValidationError):
    pass


class MalformedHeader(InputFileError):
    pass


class VertexCountMismatch(InputFileError):
    pass

"""Exception hierarchy shared by every module."""


class CopyDetError(Exception):
    """Base class for all errors raised by copydet."""


# imaging
class UnsupportedFormat(CopyDetError, ValueError):
    pass


class CorruptStream(CopyDetError, ValueError):
    pass


class UnsupportedChannels(CopyDetError, ValueError):
    pass


class DegenerateImage(CopyDetError, ValueError):
    pass


class BoxOutOfBounds(CopyDetError, ValueError):
    pass


class ParamOutOfRange(CopyDetError, ValueError):
    pass


# csv / file plumbing
class MalformedRow(CopyDetError, ValueError):
    pass


class NegativeDimension(CopyDetError, ValueError):
    pass


class IoFailure(CopyDetError, OSError):
    pass


class BadMagic(CopyDetError, ValueError):
    pass


class VersionMismatch(CopyDetError, ValueError):
    pass


# vector index
class EmptyCorpus(CopyDetError, ValueError):
    pass


class DimensionMismatch(CopyDetError, ValueError):
    pass


class TooFewVectors(CopyDetError, ValueError):
    pass


# global embeddings / metric learning
class EmptyStore(CopyDetError, ValueError):
    pass


class ZeroVector(CopyDetError, ValueError):
    pass


class NegativeDistance(CopyDetError, ValueError):
    pass


class NoValidTriplets(CopyDetError, ValueError):
    pass


class CapacityTooSmall(CopyDetError, ValueError):
    pass


class DivergedLoss(CopyDetError, ArithmeticError):
    pass


# evaluation
class EmptyGroundTruth(CopyDetError, ValueError):
    pass


class DuplicatePair(CopyDetError, ValueError):
    pass


# pipeline
class NoImagesFound(CopyDetError, FileNotFoundError):
    pass


class MissingIndex(CopyDetError, FileNotFoundError):
    pass


class MissingEmbeddings(CopyDetError, FileNotFoundError):
    pass

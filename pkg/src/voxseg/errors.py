"""Exception hierarchy shared across the toolkit."""


class VoxsegError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(VoxsegError):
    """Bad inputs / configuration detected before any work starts."""


# --- volume I/O ---

class BadMagic(VoxsegError):
    pass


class UnsupportedDatatype(VoxsegError):
    pass


class TruncatedFile(VoxsegError):
    pass


class DimMismatch(VoxsegError):
    pass


class LabelOutOfRange(VoxsegError):
    pass


# --- preprocessing ---

class SigmaZero(VoxsegError):
    pass


class ZeroRange(VoxsegError):
    pass


class DegenerateHistogram(VoxsegError):
    pass


# --- registration ---

class SingularAffine(VoxsegError):
    pass


class DegenerateInput(VoxsegError):
    pass


class NoOverlap(VoxsegError):
    pass


class ParseError(VoxsegError):
    pass


# --- network ---

class ShapeMismatch(VoxsegError):
    pass


class BadCheckpoint(VoxsegError):
    pass


class CorruptRecord(VoxsegError):
    pass


class IndivisibleShape(VoxsegError):
    pass


class ChannelMismatch(VoxsegError):
    pass


class StaleCache(VoxsegError):
    pass


# --- sampling / evaluation / cli ---

class SizeExceedsVolume(VoxsegError):
    pass


class IdMismatch(VoxsegError):
    pass


class MissingTransform(VoxsegError):
    pass

"""Exception hierarchy shared by all modules."""


class FullInfoError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FullInfoError, ValueError):
    pass


class SegmentTooShortError(DimensionError):
    pass


class FormatError(FullInfoError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ConfigMismatchError(FullInfoError):
    pass


class ConfigError(FullInfoError):
    pass


class DegenerateSpeakerError(FullInfoError):
    """A speaker has no frames, or a centroid of (near) zero length."""

    def __init__(self, message, speakers=()):
        super().__init__(message)
        self.speakers = list(speakers)


class NumericalError(FullInfoError, ArithmeticError):
    pass


class ResolutionError(FullInfoError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""

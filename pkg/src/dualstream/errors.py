"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DualStreamError(Exception):
    """Base class for every error raised by this package."""


class InvalidPointError(DualStreamError, ValueError):
    """A pixel cannot be unprojected (non-positive depth or out of bounds)."""


class ConfigError(DualStreamError, ValueError):
    pass


class FrameFormatError(DualStreamError, ValueError):
    """Raised for malformed PGM/PPM input."""


class CodecError(DualStreamError, ValueError):
    pass


class DuplicateEntryError(CodecError):
    """The requested LUT resolution exceeds what the colormap can distinguish."""


class UncoverableAreaError(CodecError):
    """The destination field of view reaches outside the source image."""


class WireFormatError(DualStreamError, ValueError):
    pass


class TruncatedError(WireFormatError):
    pass


class BadMagicError(WireFormatError):
    pass


class ChecksumError(WireFormatError):
    pass


class LayoutError(WireFormatError):
    pass


class UnknownTagError(WireFormatError):
    pass


class ProtocolError(DualStreamError):
    pass


class RoomFullError(ProtocolError):
    pass


class UnknownPeerError(ProtocolError):
    pass


class DuplicateSnapshotError(ProtocolError):
    pass


class UnknownSnapshotError(ProtocolError):
    pass


class StreamInactiveError(ProtocolError):
    pass


class ScriptError(DualStreamError, ValueError):
    """Session-script validation failure; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

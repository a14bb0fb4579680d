"""Exception hierarchy shared by all gmcodec modules."""


class CodecError(Exception):
    """Base class for every error raised by gmcodec."""


class ConfigError(CodecError):
    """Invalid configuration or shape mismatch between components."""


class UsageError(CodecError):
    """API misuse: wrong call order, stale state, bad argument values."""


class InputError(CodecError):
    """Invalid user-supplied input (image dims, missing files, ...)."""


class FormatError(CodecError):
    """Malformed serialized data (weight file or bitstream)."""


class BadMagicError(FormatError):
    """Serialized blob does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """Serialized blob has an unsupported format version."""


class DigestMismatchError(FormatError):
    """Config digest embedded in a file does not match the loaded model."""


class TruncatedError(FormatError):
    """Serialized blob ends before all declared data was read."""


class CorruptShapeError(FormatError):
    """A tensor record in a weight file declares an invalid shape."""


class DecodeError(CodecError):
    """Range decoder failure: truncated payload or symbol-count mismatch."""

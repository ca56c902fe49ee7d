class LavqError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(LavqError, ValueError):
    """A caller-supplied argument or parameter is out of its allowed domain."""


class ConfigError(ValidationError):
    pass


class DataError(LavqError):
    """Input data is unusable (non-finite samples, missing labels, ...)."""


class InsufficientBeatsError(DataError):
    pass


class FormatError(LavqError):
    """A persisted file does not follow the expected binary layout."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class EncoderError(LavqError):
    pass


class TrainingError(LavqError):
    pass

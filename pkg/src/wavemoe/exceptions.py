"""Exception hierarchy shared by every wavemoe module."""


class WaveMoEError(Exception):
    """Base class for all package errors."""


class UnsupportedWaveletError(WaveMoEError, ValueError):
    pass


class InvalidLengthError(WaveMoEError, ValueError):
    pass


class MalformedPyramidError(WaveMoEError, ValueError):
    pass


class DegenerateWindowError(WaveMoEError, ValueError):
    pass


class InsufficientContextError(WaveMoEError, ValueError):
    pass


class ConfigError(WaveMoEError, ValueError):
    pass


class ContractError(WaveMoEError, ValueError):
    """Shapes or arguments do not satisfy an operation's preconditions."""


class AlignmentError(ContractError):
    """Context, horizon or patch length violate the token alignment rules."""


class NumericError(WaveMoEError, ArithmeticError):
    pass


class EmptyCorpusError(WaveMoEError, ValueError):
    pass


class IngestionError(WaveMoEError, ValueError):
    pass


class FormatError(WaveMoEError, ValueError):
    """A binary file (corpus or checkpoint) is corrupt or truncated."""


class VersionMismatchError(FormatError):
    pass


class ConfigMismatchError(WaveMoEError, ValueError):
    pass

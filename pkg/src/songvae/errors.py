"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class SongVAEError(Exception):
    exit_code = 2


class UsageError(SongVAEError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class MissingPretrainError(UsageError):
    """A training task was started without the checkpoint it builds on."""


class ProvenanceError(UsageError):
    """A checkpoint references a parent checkpoint whose hash does not match."""


class ParseError(SongVAEError):
    pass


class EmptyFileError(SongVAEError):
    pass


class KeyEstimationError(SongVAEError):
    pass


class TooShortError(SongVAEError):
    pass


class NoPairsError(SongVAEError):
    pass


class NoInputError(SongVAEError):
    pass


class ShapeError(SongVAEError, ValueError):
    pass


class RangeError(SongVAEError, ValueError):
    pass


class DivergenceError(SongVAEError):
    exit_code = 3

class ConfigError(ValueError):
    """Invalid shapes, hyperparameters or configuration documents."""


class FormatError(OSError):
    """A volume or checkpoint file could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class HeaderMismatchError(FormatError):
    """Header fields (shape, dtype, config) disagree with the payload."""


class TrainingError(RuntimeError):
    pass

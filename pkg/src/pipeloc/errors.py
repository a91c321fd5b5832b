class PipelocError(Exception):
    exit_code = 1


class ConfigError(PipelocError, ValueError):
    exit_code = 2


class DataError(PipelocError):
    exit_code = 3


class FormatError(DataError):
    """Malformed feature-file header."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncationError(DataError):
    pass


class NumericError(PipelocError, ArithmeticError):
    exit_code = 4

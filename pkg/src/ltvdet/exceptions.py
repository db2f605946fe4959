"""Exception hierarchy shared by every module.

The CLI maps these onto exit-code classes: configuration problems exit 2,
data problems exit 3 and numeric failures exit 4.
"""


class LTVError(Exception):
    """Base class for all errors raised by ltvdet."""

    exit_code = 1


class ConfigError(LTVError, ValueError):
    """Invalid hyperparameter, config key or layer configuration."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor or grid shapes do not line up."""


class FormatError(ConfigError):
    """A serialized file (weights, config) is malformed.

    ``offset`` is the byte offset or line number where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(LTVError, ValueError):
    """Bad dataset input: missing files, malformed annotations, bad boxes."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(LTVError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 4


class StateError(LTVError, RuntimeError):
    """Operation called out of order, e.g. backward before forward."""

    exit_code = 1

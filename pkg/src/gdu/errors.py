"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class GDUError(Exception):
    exit_code = 1


class ConfigurationError(GDUError, ValueError):
    """Shapes, group layouts or experiment settings are inconsistent."""

    exit_code = 2


class ValidationError(GDUError, ValueError):
    """Input data (e.g. a grammar prefix) is not valid for the operation."""

    exit_code = 2


class NumericFault(GDUError, ArithmeticError):
    """A NaN or Inf appeared in a computation that must stay finite."""

    exit_code = 3

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (at time step {step})"
        super().__init__(message)
        self.step = step


class IngestionError(GDUError, IOError):
    """A data file is malformed. ``offset`` is the byte offset of the problem."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset

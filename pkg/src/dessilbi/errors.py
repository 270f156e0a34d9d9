"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI reports for it.
"""


class DessiError(Exception):
    exit_code = 1


class ArgumentError(DessiError, ValueError):
    exit_code = 1


class DimensionError(DessiError, ValueError):
    exit_code = 1


class ContractError(DessiError, ValueError):
    exit_code = 1


class StructuralError(DessiError, ValueError):
    exit_code = 1


class NumericError(DessiError, ArithmeticError):
    exit_code = 3


class FormatError(DessiError, ValueError):
    """Malformed input file. ``offset`` is a byte offset or line number."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class NotFoundError(DessiError, FileNotFoundError):
    exit_code = 2

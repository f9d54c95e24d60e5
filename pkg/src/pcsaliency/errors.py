"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class PCSMError(Exception):
    exit_code = 1


class StructuralError(PCSMError, ValueError):
    """Shapes, indices or arguments that violate an operation's contract."""

    exit_code = 3


class NumericError(PCSMError, ArithmeticError):
    """Non-finite values entering a computation, or training divergence."""

    exit_code = 4


class StateError(PCSMError, RuntimeError):
    exit_code = 3


class FormatError(PCSMError):
    """Checkpoint or bundle header that fails validation."""

    exit_code = 3


class ParseError(FormatError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")

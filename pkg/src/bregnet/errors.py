"""Exception hierarchy shared across the package."""


class BregError(Exception):
    """Base class for all package errors."""


class ContractError(BregError, ValueError):
    """An argument violates an operation's preconditions (shape, range, ...)."""


class NumericalError(BregError, ArithmeticError):
    """A NaN or infinity appeared at an op boundary."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite value in {op}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class UndefinedMetricError(BregError, ArithmeticError):
    """A metric is mathematically undefined for the given inputs."""


class BuildError(BregError, ValueError):
    """A network configuration cannot be realised."""


class DataFormatError(BregError, ValueError):
    """An input file is malformed.  ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class ConfigError(BregError, ValueError):
    """A run configuration is invalid (unknown key, bad value)."""

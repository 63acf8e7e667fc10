"""Exception hierarchy shared by every module."""


class VcrError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class DimensionError(VcrError, ValueError):
    exit_code = 2


class DomainError(VcrError, ValueError):
    exit_code = 2


class NonFiniteError(DomainError):
    """An intermediate value (scores, correspondences) overflowed to inf or NaN."""


class ContractError(VcrError, RuntimeError):
    exit_code = 2


class ConfigError(VcrError, ValueError):
    exit_code = 2


class ParseError(VcrError, ValueError):
    """Malformed input file. ``offset`` is the byte offset of the problem."""

    exit_code = 2

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


class DegenerateGeometryError(VcrError, ArithmeticError):
    exit_code = 3


class CheckpointError(VcrError):
    exit_code = 4


class TrainingDiverged(VcrError, FloatingPointError):
    """Raised when a loss turns non-finite. Carries the last finite parameter state."""

    exit_code = 1

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step

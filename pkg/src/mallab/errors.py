"""Exception types.  Each maps to a CLI exit code via ``exit_code``."""


class MalError(Exception):
    exit_code = 1


class ConfigError(MalError, ValueError):
    exit_code = 2


class DomainError(MalError, ValueError):
    exit_code = 2


class ParseError(MalError, ValueError):
    exit_code = 2


class IntegrityError(MalError, ValueError):
    exit_code = 2


class CapacityError(MalError, ValueError):
    exit_code = 2


class DegenerateDataError(MalError, ValueError):
    exit_code = 2


class DataError(MalError, ValueError):
    exit_code = 2


class UndefinedMetricError(MalError, ValueError):
    exit_code = 4


class ShapeError(MalError, ValueError):
    exit_code = 4


class MalIndexError(MalError, IndexError):
    exit_code = 4


class GraphError(MalError, RuntimeError):
    exit_code = 4


class NumericError(MalError, ArithmeticError):
    exit_code = 4


class CorruptionError(MalError, IOError):
    exit_code = 3


class DependencyError(MalError, FileNotFoundError):
    exit_code = 3


class StalenessError(MalError, RuntimeError):
    exit_code = 3

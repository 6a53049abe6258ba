"""Exception hierarchy. The CLI maps the three base classes to exit codes."""


class BenchError(Exception):
    exit_code = 1


class ConfigError(BenchError):
    exit_code = 2


class DataError(BenchError):
    exit_code = 3


class NumericalError(BenchError):
    exit_code = 4


class MalformedCsv(DataError):
    pass


class SimplexViolation(DataError):
    pass


class EmptyTask(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class TaskMismatch(DataError):
    pass


class SplitMismatch(DataError):
    pass


class IndexMismatch(DataError):
    pass


class UnknownTask(DataError):
    pass


class EmptyInput(DataError):
    pass


class ConstantActuals(DataError):
    pass


class ConstantInput(DataError):
    pass


class NoObservedEntries(DataError):
    pass


class InvalidConfig(ConfigError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class NonFinite(NumericalError):
    pass

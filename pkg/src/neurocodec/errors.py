"""Exception hierarchy.

The CLI maps the three base classes to exit codes: ConfigError -> 1,
DataError -> 2, NumericsError -> 3.
"""


class NeurocodecError(Exception):
    pass


class ConfigError(NeurocodecError, ValueError):
    pass


class DataError(NeurocodecError, ValueError):
    pass


class NumericsError(NeurocodecError, ArithmeticError):
    pass


class FormatError(DataError):
    pass


class RegistryError(DataError):
    pass


class ResampleError(DataError):
    pass


class SegmentError(DataError):
    pass


class SequenceLengthError(DataError):
    pass


class SplitError(DataError):
    pass


class MaskError(DataError):
    pass


class MetricUndefined(NumericsError):
    pass

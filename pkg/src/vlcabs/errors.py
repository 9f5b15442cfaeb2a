"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI: 2 for configuration
problems, 3 for data problems, 4 for numeric failures.
"""


class VlcabsError(Exception):
    exit_code = 1


class ConfigError(VlcabsError):
    exit_code = 2


class InvalidSpec(ConfigError):
    pass


class DataError(VlcabsError):
    exit_code = 3


class DimensionMismatch(DataError):
    pass


class EmptyGrid(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionUnsupported(DataError):
    pass


class TruncatedFile(DataError):
    pass


class UnknownId(DataError):
    pass


class EmptyPositives(DataError):
    pass


class GeometryMismatch(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class EmptyMasks(DataError):
    pass


class EmptyDataset(DataError):
    pass


class NumericError(VlcabsError):
    exit_code = 4


class ZeroNorm(NumericError):
    pass

"""Exception hierarchy. Each family maps to a CLI exit code."""


class AtlbpError(Exception):
    exit_code = 1


class UsageError(AtlbpError):
    exit_code = 1


class DataError(AtlbpError):
    exit_code = 2


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class LabelError(DataError):
    pass


class ConfigError(AtlbpError):
    exit_code = 1


class DimensionError(AtlbpError, ValueError):
    exit_code = 3


class NumericDomainError(AtlbpError, ArithmeticError):
    exit_code = 3

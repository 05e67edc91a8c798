"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
first token of its one-line failure message.
"""


class SataError(Exception):
    category = "error"


class ContractError(SataError):
    category = "contract"


class DimensionError(SataError, ValueError):
    category = "dimension"


class ParameterError(SataError, ValueError):
    category = "parameter"


class ConfigError(SataError, ValueError):
    category = "config"


class DataError(SataError, ValueError):
    category = "data"


class FormatError(DataError):
    category = "format"


class CorruptionError(DataError):
    category = "corruption"


class CheckpointError(SataError):
    category = "checkpoint"


class NonFiniteError(SataError, ArithmeticError):
    category = "numeric"

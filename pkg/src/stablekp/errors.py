"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class StableKPError(Exception):
    exit_code = 1
    kind = "error"


class InvalidArgumentError(StableKPError, ValueError):
    exit_code = 4
    kind = "invalid-argument"


class DegenerateGeometryError(InvalidArgumentError):
    kind = "degenerate-geometry"


class InsufficientDataError(InvalidArgumentError):
    kind = "insufficient-data"


class IndeterminateError(InvalidArgumentError):
    kind = "indeterminate"


class TrainingDivergedError(StableKPError, FloatingPointError):
    exit_code = 5
    kind = "diverged"


class ConfigError(StableKPError, ValueError):
    exit_code = 2
    kind = "usage"

"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see ``lstmdrop.cli``).
"""


class LabError(Exception):
    exit_code = 2


class DimensionError(LabError, ValueError):
    exit_code = 1


class UsageError(LabError):
    exit_code = 1


class ConfigError(LabError):
    exit_code = 1


class NumericError(LabError, ArithmeticError):
    exit_code = 2


class SamplingError(LabError):
    exit_code = 2


class CheckpointError(LabError):
    """Raised for corrupt, truncated or incompatible checkpoint files."""

    exit_code = 3

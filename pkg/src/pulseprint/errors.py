"""Exception hierarchy shared across the package.

CLI exit codes: UsageError/ConfigError -> 1, data-facing errors -> 2,
NumericGuardError -> 3.
"""


class PulseprintError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(PulseprintError):
    """Bad invocation: unknown flag, missing argument, missing inputs."""


class ConfigError(PulseprintError):
    """A configuration value is out of its legal range."""


class InputError(PulseprintError):
    """Malformed or empty input data."""


class DataError(PulseprintError):
    """Dataset cannot support the requested operation."""


class QualityError(PulseprintError):
    """Signal quality too poor to proceed (no periodicity, too few beats)."""


class MetricError(PulseprintError):
    """Score set cannot support the requested metric."""


class NumericGuardError(PulseprintError):
    """A numeric guard tripped (zero norm, non-finite loss)."""


class ContractError(PulseprintError):
    """An internal API contract was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""

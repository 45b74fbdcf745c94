"""Exception taxonomy shared by every module.

ConfigError (and subclasses) map to CLI exit code 2; everything else
derived from BurstVladError maps to exit code 1.
"""


class BurstVladError(Exception):
    """Base class for all package errors."""


class FormatError(BurstVladError):
    """File has a bad magic, version, or dtype tag."""


class TruncatedError(FormatError):
    """File header promises more payload than the file holds."""


class DataError(BurstVladError):
    """Input data violates a value-level contract (non-finite, zero row, too small)."""


class IoError(BurstVladError):
    """Underlying filesystem write/read failed."""


class ShapeError(BurstVladError):
    """Dimension mismatch between operands."""


class ContractError(BurstVladError):
    """Caller violated a documented precondition (e.g. un-normalized rows)."""


class ConfigError(BurstVladError):
    """Bad configuration value or usage; CLI exit code 2."""


class ManifestError(ConfigError):
    """Dataset manifest is malformed or references missing files."""


class DegenerateError(BurstVladError):
    """Numerically degenerate input (rank deficiency, all-zero aggregate)."""


class NumericalError(BurstVladError):
    """Non-finite value produced at a named pipeline stage."""


class BenchError(BurstVladError):
    """Benchmark cannot produce a trustworthy measurement."""

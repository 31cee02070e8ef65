"""Exception types shared across the package."""


class SkelVitError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SkelVitError):
    """A configuration value is invalid or inconsistent."""


class PoseParseError(SkelVitError):
    """A pose file could not be parsed; message names the offending line."""


class PoseValidationError(SkelVitError):
    """A pose record violates index bounds or uniqueness."""


class ContractError(SkelVitError):
    """Caller passed data whose shape or width violates an interface contract."""


class NumericError(SkelVitError):
    """Non-finite values reached a numeric operation."""


class DataError(SkelVitError):
    """A sample is missing data required by the active configuration."""

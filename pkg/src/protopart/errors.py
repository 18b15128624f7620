"""Exception hierarchy shared by all engine components."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EngineError):
    """Array shapes do not satisfy an operation's contract."""


class DomainError(EngineError):
    """A value lies outside an operation's mathematical domain."""


class ContractError(EngineError):
    """An API was called in a way its contract forbids."""


class ConfigError(EngineError):
    """A configuration value is invalid or inconsistent."""


class NumericError(EngineError):
    """A computation produced NaN/Inf or an inconsistent numeric result."""


class ProjectionError(EngineError):
    """Prototype projection could not be carried out."""


class DataError(EngineError):
    """A dataset or serialized artifact is malformed or unreadable."""

"""Exception taxonomy shared across the package."""


class ContsegError(Exception):
    """Base class for every package-specific error."""


class ConfigurationError(ContsegError, ValueError):
    """A configuration, dataset spec, or schedule is invalid."""


class ContractError(ContsegError, ValueError):
    """A call violated an operation contract (shapes, ids, preconditions)."""


class ProtocolError(ContsegError, ValueError):
    """A step index or incremental-protocol usage is out of range."""


class CapabilityError(ContsegError, NotImplementedError):
    """An operation was requested for an unsupported layer or metric kind."""


class UndefinedMetricError(ContsegError, ArithmeticError):
    """A metric is undefined for the requested class subset."""


class DivergenceError(ContsegError, RuntimeError):
    """Training aborted because a loss term became non-finite."""

"""Exception types shared across the toolkit."""


class TlabError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TlabError, ValueError):
    """Invalid configuration, dimensions or settings."""


class ContractError(TlabError, ValueError):
    """A caller violated an operation's preconditions (shapes, label ranges)."""


class NumericInputError(TlabError, ValueError):
    """Non-finite values where finite ones are required."""


class SizeGuardError(TlabError, ValueError):
    """Instance too large for an enumeration oracle."""


class DivergenceError(TlabError, ArithmeticError):
    """Training produced a non-finite loss."""

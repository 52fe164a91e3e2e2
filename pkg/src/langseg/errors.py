"""Exception types shared across the package."""


class LangSegError(Exception):
    """Base class for all package errors."""


class DimensionError(LangSegError, ValueError):
    pass


class ContractError(LangSegError, ValueError):
    """A caller violated a documented precondition."""


class DataError(LangSegError, ValueError):
    pass


class ConfigError(LangSegError, ValueError):
    pass


class FormatError(LangSegError, ValueError):
    """An on-disk artifact is malformed or inconsistent."""


class NumericError(LangSegError, ArithmeticError):
    pass


class ArtifactMismatchError(LangSegError):
    """A checkpoint does not belong to the requested configuration."""

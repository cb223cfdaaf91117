"""Exception hierarchy shared by every module."""


class AsgcnError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class DimensionError(AsgcnError, ValueError):
    exit_code = 2


class ParameterError(AsgcnError, ValueError):
    exit_code = 2


class ValidationError(AsgcnError, ValueError):
    exit_code = 2


class ConfigurationError(AsgcnError, ValueError):
    exit_code = 2


class ParseError(AsgcnError, ValueError):
    exit_code = 2


class NumericError(AsgcnError, ArithmeticError):
    exit_code = 3

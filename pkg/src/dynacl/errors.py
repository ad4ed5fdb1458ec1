"""Exception hierarchy. The CLI maps each family to an exit code."""


class DynaclError(Exception):
    exit_code = 1


class ConfigError(DynaclError, ValueError):
    exit_code = 2


class ContractError(DynaclError, ValueError):
    """A caller violated a precondition (shape, range, label bounds)."""

    exit_code = 2


class DataError(DynaclError):
    exit_code = 3


class NumericError(DynaclError, ArithmeticError):
    exit_code = 4

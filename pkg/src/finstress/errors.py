"""Exception hierarchy; each class maps onto a CLI exit code."""


class FinstressError(Exception):
    exit_code = 1


class ConfigError(FinstressError):
    exit_code = 2


class DataError(FinstressError, ValueError):
    exit_code = 3


class NumericError(FinstressError, ArithmeticError):
    exit_code = 4

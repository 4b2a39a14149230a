"""Exception hierarchy; the CLI maps each family to an exit code."""


class MaskspotError(Exception):
    exit_code = 1


class ConfigError(MaskspotError, ValueError):
    exit_code = 1


class DataError(MaskspotError, ValueError):
    exit_code = 2


class NumericError(MaskspotError, ArithmeticError):
    exit_code = 3

"""Exception types. Each maps to a CLI exit code."""


class WifiPoseError(Exception):
    exit_code = 1


class ConfigError(WifiPoseError, ValueError):
    exit_code = 2


class DataError(WifiPoseError, ValueError):
    exit_code = 3


class NumericError(WifiPoseError, ArithmeticError):
    exit_code = 4

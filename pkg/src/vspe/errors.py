"""Error categories; the CLI maps each to its own exit code."""


class VspeError(Exception):
    exit_code = 1


class ConfigError(VspeError):
    """Malformed config file, unknown key or invalid value."""

    exit_code = 2


class DataError(VspeError):
    """Missing or malformed data files, or data that cannot be generated."""

    exit_code = 3


class NumericError(VspeError):
    """Non-finite loss or gradient, or a failed numerical check."""

    exit_code = 4

"""Exception types that the command-line entry points map to exit codes."""


class ConfigError(Exception):
    """Bad or unknown configuration key/value (exit code 2)."""


class DataError(Exception):
    """Missing, malformed, or mismatched dataset artifacts (exit code 3)."""


class NumericalError(Exception):
    """Non-finite values encountered where finiteness is required (exit code 4)."""

"""Exception hierarchy and the CLI exit codes they map to."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_THRESHOLD = 4


class RetssimError(Exception):
    exit_code = 1


class ConfigError(RetssimError, ValueError):
    """Invalid parameters or run configuration."""

    exit_code = EXIT_CONFIG


class DomainError(ConfigError):
    """Distribution parameters outside their admissible domain."""


class DataError(RetssimError, ValueError):
    """Input data that cannot support the requested computation."""

    exit_code = EXIT_DATA


class ThresholdError(RetssimError):
    exit_code = EXIT_THRESHOLD

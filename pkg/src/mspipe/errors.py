"""Exception types, mapped to CLI exit codes by the command-line layer."""


class MspipeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(MspipeError):
    """Invalid configuration: missing files, bad parameters, malformed manifests."""

    exit_code = 2


class DataError(MspipeError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class CalibrationError(DataError):
    """White/dark reference unusable: W - D not strictly positive somewhere.

    ``index`` holds the first offending (row, col, band) triple, if known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateSpectrumError(DataError):
    """All-zero spectrum, typically a dark or fully occluded ROI."""

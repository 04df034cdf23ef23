"""Exception hierarchy shared across the pipeline.

The CLI maps these onto distinct exit codes: config problems, data problems,
and everything else.
"""


class LungsoundError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(LungsoundError):
    """Invalid or inconsistent run configuration."""


class DataError(LungsoundError):
    """Problem with input data (parsing, referential integrity, missing fields)."""


class ParseError(DataError):
    """Malformed input file. Carries the offending path and location."""

    def __init__(self, message, path=None, where=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if where is not None:
            detail = f"{detail} (at {where})"
        super().__init__(detail)
        self.path = path
        self.where = where


class IntegrityError(DataError):
    """Referential integrity violation between corpus tables."""


class UnknownLabelError(DataError):
    """A label outside the closed set a taxonomy or parser expects."""


class ContractError(LungsoundError):
    """An internal interface contract was violated (shapes, lengths, simplex)."""


class BackendUnavailableError(LungsoundError):
    """An encoder backend cannot run in this environment. Includes a remediation hint."""

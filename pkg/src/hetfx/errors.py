"""Error taxonomy shared by the library and the command line tool.

Exit codes: ConfigError maps to 2, DataError to 3, NumericError to 4.
"""


class HetfxError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HetfxError):
    """Invalid options, flags, or parameter combinations."""

    exit_code = 2


class DataError(HetfxError):
    """Input data violates a precondition (schema, pairing, routing)."""

    exit_code = 3


class SchemaError(DataError):
    """A required column or covariate is missing or of the wrong kind."""


class NumericError(HetfxError):
    """A numeric routine failed to produce a usable result."""

    exit_code = 4


class EmptyLeafWarning(UserWarning):
    """A tree leaf received no pairs during assignment."""


class MatchingWarning(UserWarning):
    """Some treated units could not be paired and were dropped."""


class DiscoveryWarning(UserWarning):
    """Tree growing found nothing usable (e.g. identical responses)."""


class BracketClampWarning(UserWarning):
    """A subgroup was too small to express part of a scanned effect range."""

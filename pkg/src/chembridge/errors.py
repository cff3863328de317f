"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class ChembridgeError(Exception):
    exit_code = 1


class SchemaError(ChembridgeError):
    """Input file is missing a required column or has malformed structure."""

    exit_code = 2


class DataError(ChembridgeError):
    """Input is well formed but its content is unusable."""

    exit_code = 3


class EmptyDatasetError(DataError):
    pass


class SplitError(DataError):
    pass


class EmbeddingError(DataError):
    pass


class NumericError(ChembridgeError):
    exit_code = 4

"""Error taxonomy shared across the package.

Errors fall into three coarse families, which the command line maps to
exit codes: usage/configuration problems (exit 2), data and IO problems
(exit 3), and numeric failures during optimization (exit 4).
"""

from __future__ import annotations


class VaemoError(Exception):
    """Base class for all package errors."""


class ConfigError(VaemoError):
    """Invalid, unknown, or inconsistent configuration value."""


class ParameterError(VaemoError):
    """A function argument is outside its documented domain."""


class ShapeError(VaemoError):
    """Array shapes are incompatible for the requested operation."""


class ContractError(VaemoError):
    """An API precondition was violated (e.g. backward from a non-scalar)."""


class DataError(VaemoError):
    """Missing or inconsistent dataset content (samples, captions, folds)."""


class FormatError(VaemoError):
    """A binary container or checkpoint is malformed or truncated."""


class ParseError(VaemoError):
    """Text content (JSONL, config file, CLI override) failed to parse."""


class TransportError(VaemoError):
    """A remote model endpoint could not be reached or answered garbage."""


class NumericError(VaemoError):
    """Non-finite values were produced where finite ones are required."""


USAGE_ERRORS = (ConfigError, ParameterError, ShapeError, ContractError)
DATA_ERRORS = (DataError, FormatError, ParseError, TransportError)
NUMERIC_ERRORS = (NumericError,)

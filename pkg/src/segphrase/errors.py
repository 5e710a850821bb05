"""Shared exception hierarchy.

The CLI maps DataError to exit code 2 and NumericalError to exit code 3;
everything raised by this package derives from Error so callers can catch
library failures without also swallowing programming mistakes.
"""


class Error(Exception):
    """Base class for all segphrase errors."""


class DataError(Error):
    """Malformed or inconsistent input data (files, manifests, formats)."""


class NumericalError(Error):
    """Numerical or model failure (collapse, non-monotone fit, undefined value)."""

"""Exception classes shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/format
errors exit 2, numerical failures exit 3.
"""


class DdakError(Exception):
    """Base class for package errors."""


class DataFormatError(DdakError):
    """A file or buffer does not conform to an expected format."""


class NumericalError(DdakError):
    """An operation produced non-finite values or diverged."""

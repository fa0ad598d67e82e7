"""Exception hierarchy shared across the toolkit.

Configuration invariant violations raise plain ValueError; everything tied
to data content, file formats, or numerical breakdown gets a typed error so
callers (and the CLI exit-code mapping) can tell them apart.
"""


class ToolkitError(Exception):
    """Base class for all toolkit-specific errors."""


class DataError(ToolkitError):
    """Invalid or inconsistent input data (CLI exit code 2)."""


class ShapeError(DataError):
    """Dimension mismatch between arrays that must align."""


class MaskValueError(DataError):
    """Label mask contains a byte outside the known label codes."""


class ManifestError(DataError):
    """Dataset manifest is malformed or violates its schema."""


class WktError(DataError):
    """WKT polygon string cannot be parsed."""


class ModelFileError(DataError):
    """Model file is truncated, version-mismatched, or shape-inconsistent."""


class NotAModelFileError(ModelFileError):
    """File does not carry the expected magic bytes."""


class NumericsError(ToolkitError):
    """Non-finite value encountered during optimization (CLI exit code 3)."""

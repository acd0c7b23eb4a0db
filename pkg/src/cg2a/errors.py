"""Exception classes shared across the package.

The CLI maps these onto stable exit codes (see harness.main):
config errors -> 2, I/O errors -> 3, structural/numeric errors -> 4.
"""


class StructuralError(ValueError):
    """Shapes, lengths or protocol structure violate a contract."""


class NumericError(ValueError):
    """Numeric input is invalid (non-finite values, out-of-range scalars)."""


class ConfigError(ValueError):
    """A run configuration is missing, unparseable or inconsistent.

    ``code`` distinguishes the failure class; ``field`` names the offending
    key where one exists.
    """

    def __init__(self, message, code="invalid_value", field=None):
        super().__init__(message)
        self.code = code
        self.field = field


class ProtocolError(RuntimeError):
    """An environment or training protocol was driven out of order."""

"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
format subclasses) -> 3, NumericError -> 4.
"""


class NREError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(NREError):
    """Invalid, missing, or contradictory configuration."""


class DataError(NREError):
    """Problems with datasets or data files."""


class FormatError(DataError):
    """A binary container violated its on-disk format."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(FormatError):
    """File ended before the declared payload was complete."""


class CountMismatchError(FormatError):
    """Image and label files declare different record counts."""


class VersionMismatchError(FormatError):
    """Checkpoint container version is not supported."""


class FingerprintMismatchError(FormatError):
    """Stored parameter fingerprint does not match the payload."""


class NumericError(NREError):
    """Non-finite values or numerical divergence."""


class DivergenceError(NumericError):
    """Training loss became non-finite or grew without bound."""

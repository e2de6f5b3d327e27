"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericError -> 2,
VerificationError -> 3.  Everything else is a bug and propagates.
"""


class IwelabError(Exception):
    """Base class for package errors."""


class ConfigError(IwelabError):
    """Invalid configuration, arguments, or artifact files."""


class DimensionError(IwelabError):
    """Array shape does not match the declared architecture."""


class NumericError(IwelabError):
    """Non-finite values where finite ones are required (divergence, bad logits)."""


class VerificationError(IwelabError):
    """Verification preconditions violated (population too small, hash mismatch...)."""

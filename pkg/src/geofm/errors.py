"""Exception taxonomy shared by every subsystem.

The CLI maps these onto exit codes: config/usage problems exit 2,
numeric/runtime failures exit 3.
"""


class GeofmError(Exception):
    """Base class for all package errors."""


class ShapeError(GeofmError):
    """Tensor dimensions disagree with an operation's contract."""


class ConfigError(GeofmError):
    """A configuration value is invalid or inconsistent."""


class UsageError(GeofmError):
    """An API was called outside its precondition."""


class AdaptationError(UsageError):
    """Input band count does not match the patch-embed layer."""


class NumericError(GeofmError):
    """A non-finite value appeared where finite math was required."""


class FormatError(GeofmError):
    """An on-disk artifact is malformed."""


class CheckpointError(FormatError):
    """Checkpoint manifest and payload disagree, or names mismatch."""


class GenerationError(GeofmError):
    """Synthetic scene generation could not satisfy its constraints."""

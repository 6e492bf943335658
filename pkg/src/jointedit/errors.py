"""Exception taxonomy shared across the package.

Every error raised on a contract violation subclasses JointEditError so the
CLI can map failures onto its exit codes (usage 64, sequencing 3, I/O 2).
"""


class JointEditError(Exception):
    """Base class for all package errors."""


class DimensionError(JointEditError):
    """Shape mismatch; message carries both shapes."""


class DomainError(JointEditError):
    """Value outside its mathematical domain (t out of range, r <= 0, ...)."""


class NumericError(JointEditError):
    """NaN or non-finite input where finiteness is a precondition."""


class UsageError(JointEditError):
    """API misuse (non-scalar backward root, mixed dtypes in one graph, ...)."""


class ConfigError(JointEditError):
    """Inconsistent or unknown configuration."""


class SequencingError(JointEditError):
    """Stage ordering violation (missing prerequisite checkpoint)."""


class FormatError(JointEditError):
    """Malformed file (checkpoint magic/version, manifest schema, ...)."""


class CorruptionError(FormatError):
    """Checksum mismatch or truncated payload; message names the file."""


class PlacementError(JointEditError):
    """Edit target renders to an empty silhouette (outside the FOV)."""

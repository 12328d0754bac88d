"""Exception taxonomy shared by all pipeline stages.

The CLI maps these to exit codes: ConfigurationError -> 2, DataError -> 3,
NumericError -> 4.
"""


class UniFaultError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(UniFaultError):
    """Invalid or inconsistent configuration values."""


class DataError(UniFaultError):
    """Malformed, missing, or mismatched data."""


class NumericError(UniFaultError):
    """Non-finite or otherwise numerically invalid values."""


class ShapeError(DataError):
    """Array dimensions disagree with what an operation requires."""


class ManifestError(DataError):
    """Manifest file cannot be read or parsed at all (distinct from
    per-recording validation issues, which are reported as a list)."""


class MissingStatsError(DataError):
    """Normalization requested for a (dataset, channel) group that was never
    fitted."""


class InvalidPairError(DataError):
    """Fusion pair with incompatible windows."""


class SignalFormatError(DataError):
    """Signal file with bad magic, version, or truncated payload."""


class CheckpointError(DataError):
    """Base class for checkpoint read failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload does."""


class CheckpointMismatchError(CheckpointError):
    """Stored tensors or config disagree with what the caller expects."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    """Exit code the CLI should use for a raised toolkit error."""
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, DataError):
        return EXIT_DATA
    return 1

"""Exception types shared across the package."""


class WatchdialError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(WatchdialError, ValueError):
    """Tensor extents do not line up for an operation."""


class ConfigError(WatchdialError, ValueError):
    """Invalid model or world configuration."""


class ProgramError(WatchdialError, ValueError):
    """A reasoning program violates the grammar.

    Carries the machine-checkable violation code plus the offending step
    index, so callers can branch on the exact rule that failed.
    """

    def __init__(self, code, message, step=None):
        super().__init__(message)
        self.code = code
        self.step = step


class DataError(WatchdialError, ValueError):
    """Corpus or sample content is unusable (bad record, vocab mismatch)."""


class CheckpointError(WatchdialError, ValueError):
    """Checkpoint file is corrupt, truncated, or from another format version."""


class DivergenceError(WatchdialError, RuntimeError):
    """Training produced a non-finite value; message names the first bad tensor."""

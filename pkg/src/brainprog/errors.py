"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 1 (usage),
DependencyError / FormatError -> 2, NumericalError / TrainingError -> 3.
"""


class BrainprogError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(BrainprogError):
    """Invalid configuration value, flag, or precondition."""


class ShapeError(BrainprogError):
    """Array or tensor shape mismatch between operands."""


class ContractError(BrainprogError):
    """Violation of an API contract (frozen handles, scale flags, segmenter identity)."""


class DependencyError(BrainprogError):
    """Checkpoint hash mismatch or missing upstream artifact."""


class FormatError(BrainprogError):
    """Malformed or unsupported file content.

    ``code`` is a short stable identifier (e.g. ``bad-magic``) so callers can
    branch without string matching on messages.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class NumericalError(BrainprogError):
    """Non-finite loss or degenerate numerical state."""


class TrainingError(BrainprogError):
    """A training run failed to reach its configured gate."""

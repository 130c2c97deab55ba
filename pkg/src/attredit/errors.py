"""Exception taxonomy shared across the package."""


class AttreditError(Exception):
    """Base class for all package errors."""


class DimensionError(AttreditError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(AttreditError, ValueError):
    """An operation precondition was violated (bad value, range, or mode)."""


class ConfigError(AttreditError, ValueError):
    """A run configuration is inconsistent or unrealizable."""


class HarnessError(AttreditError, RuntimeError):
    """A verification harness detected an unusable setup (e.g. a
    non-deterministic closure under finite differencing)."""


class ManifestError(AttreditError, ValueError):
    """A dataset manifest failed to load; carries itemized row errors."""

    def __init__(self, message, items=None):
        super().__init__(message)
        self.items = list(items or [])


class EvalGateError(AttreditError, RuntimeError):
    """Evaluation refused to run because a quality gate was not met."""


class TrainingAborted(AttreditError, RuntimeError):
    """Training stopped on a non-finite loss; last good checkpoint is kept."""

"""Exception hierarchy shared by the library and the CLI."""


class CriticalityError(Exception):
    """Base class for all pipeline errors.

    ``exit_code`` is what the CLI returns when the error escapes a command.
    """

    exit_code: int = 1


class ConfigurationError(CriticalityError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class UsageError(CriticalityError, RuntimeError):
    """An operation was called in a state that does not allow it."""

    exit_code = 2


class OutputExistsError(CriticalityError, FileExistsError):
    """Output already present and ``--force`` was not given."""

    exit_code = 2


class MissingArtifactError(CriticalityError, FileNotFoundError):
    """A prerequisite artifact from an earlier stage is missing."""

    exit_code = 3

    def __init__(self, artifact: str, hint: str = ""):
        self.artifact = artifact
        message = f"Missing prerequisite artifact: {artifact}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class TrainingDivergenceError(CriticalityError, RuntimeError):
    """Loss became non-finite during training."""

    exit_code = 4

    def __init__(self, stage: str, step: int, recent_losses: list[float]):
        self.stage = stage
        self.step = step
        self.recent_losses = recent_losses
        super().__init__(
            f"{stage} diverged at step {step}: non-finite loss "
            f"(recent losses: {recent_losses})"
        )


class DataIntegrityError(CriticalityError, ValueError):
    """Episodes and dataset disagree, or a record violates its invariants."""


class ChecksumError(DataIntegrityError):
    """Stored checksum does not match file contents."""


class FormatVersionError(DataIntegrityError):
    """File written by an incompatible format version."""


class EnumerationBudgetError(CriticalityError, RuntimeError):
    """Exact oracle would enumerate more noise paths than allowed."""


class UndefinedMetricError(CriticalityError, ValueError):
    """Metric is undefined for the given input (e.g. single class)."""


class OverFilteringError(CriticalityError, ValueError):
    """Stage-1 survivors hold a single class, so stage 2 cannot train."""


class ShapeError(CriticalityError, ValueError):
    """Input array shape does not match the model descriptor."""


class NormalizationError(CriticalityError, ValueError):
    """A classifier weight vector has zero norm."""


class OracleUnavailableError(CriticalityError, RuntimeError):
    """Exact criticality oracle is not available for this data source."""


class ProvenanceError(DataIntegrityError):
    """Artifacts were produced under a different configuration."""

    exit_code = 2

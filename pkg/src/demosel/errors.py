"""Exception types shared across the package."""


class DemoselError(Exception):
    """Base class for all package errors."""


class DataFormatError(DemoselError):
    """A data file could not be parsed or violates a dataset invariant."""


class TrainingSetupError(DemoselError):
    """A training run was configured with nothing valid to train on."""


class TrainingDivergedError(DemoselError):
    """Training produced a non-finite loss or non-finite parameters."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite values at training step {step}")


class UnsupportedOptimizerError(DemoselError):
    """The requested optimizer cannot be used in this mode."""


class EstimationError(DemoselError):
    """A datamodel could not be estimated from the given outcomes."""


class SelectionError(DemoselError):
    """Cluster selection failed (bad scores or an empty filtered selection)."""


class ConfigError(DemoselError):
    """A run configuration is malformed or inconsistent with on-disk artifacts."""

"""Exception hierarchy shared across the package.

Every error that callers are expected to catch derives from DehazeError so
that the CLI can map failures onto its documented exit codes.
"""


class DehazeError(Exception):
    """Base class for all package errors."""


class ValidationError(DehazeError, ValueError):
    """Input data violates a documented precondition."""


class ParameterError(DehazeError, ValueError):
    """A scalar parameter is outside its legal range."""


class ShapeError(ValidationError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateTransmissionError(ValidationError):
    """Transmission fell below the inversion floor; region unrecoverable."""


class NumericError(DehazeError, ArithmeticError):
    """A computed quantity is NaN or infinite where it must be finite."""


class DatasetError(DehazeError):
    """Dataset directory or manifest is unusable."""


class PairingError(DehazeError):
    """Prediction/ground-truth pairing could not be resolved for some files."""


class ConfigError(DehazeError):
    """A configuration document failed to parse or validate."""


class CheckpointError(DehazeError):
    """Checkpoint or weight archive could not be loaded."""


class CheckpointIntegrityError(CheckpointError):
    """Stored content hash does not match the tensor container."""


class CheckpointIncompatibleError(CheckpointError):
    """Archive metadata does not match the requested architecture."""


class TrainingAbortError(DehazeError):
    """Training stopped because a loss component became non-finite."""

    def __init__(self, component: str, step: int):
        self.component = component
        self.step = step
        super().__init__(f"non-finite loss component '{component}' at step {step}")

"""Exception hierarchy shared by every pipeline stage."""


class WearmilError(Exception):
    """Base class for errors raised by the pipeline."""


class DataError(WearmilError):
    """Input data is missing, malformed or inconsistent."""


class FormatError(DataError):
    """A binary container could not be decoded."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ConfigurationError(WearmilError):
    """A configuration value or combination of settings cannot be honoured."""


class Rejection(DataError):
    """A window, week or night failed a gate and yields no instance."""

    def __init__(self, reason, detail=""):
        message = reason if not detail else f"{reason}: {detail}"
        super().__init__(message)
        self.reason = reason


class TrainingDiverged(WearmilError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, param_norms):
        norms = ", ".join(f"{name}={value:.3g}" for name, value in param_norms.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")
        self.epoch = epoch
        self.batch = batch
        self.param_norms = param_norms


class StaleTraceError(WearmilError):
    """backward() was called with a trace computed from older parameters."""

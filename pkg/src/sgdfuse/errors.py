"""Exception hierarchy shared by every sgdfuse module."""

from pathlib import Path


class SGDFuseError(Exception):
    """Base class for all sgdfuse errors."""


class ConfigError(SGDFuseError, ValueError):
    """Invalid configuration value or combination."""


class DimensionError(SGDFuseError, ValueError):
    """Shape, channel or spatial-size contract violated."""


class RangeError(SGDFuseError, ValueError):
    """Diffusion timestep outside the schedule."""


class NumericalError(SGDFuseError, ArithmeticError):
    """A network stage produced non-finite values."""

    def __init__(self, stage: str, message: str | None = None) -> None:
        self.stage = stage
        super().__init__(message or f"Non-finite values produced in stage '{stage}'")


class EmptyDatasetError(SGDFuseError):
    """A dataset scan found no complete pairs."""


class DatasetReadError(SGDFuseError, OSError):
    """An image file is missing or cannot be decoded."""

    def __init__(self, path: Path | str, message: str | None = None) -> None:
        self.path = Path(path)
        super().__init__(message or f"Cannot read image file: {self.path}")


class RemoteMaskError(SGDFuseError):
    """The remote segmentation service did not return a usable mask."""

    def __init__(self, reason: str, attempts: int, message: str | None = None) -> None:
        self.reason = reason
        self.attempts = attempts
        super().__init__(message or f"Remote mask request failed ({reason}) after {attempts} attempts")


class CheckpointError(SGDFuseError):
    """A checkpoint is unreadable or does not match the configured model."""

    def __init__(self, message: str, mismatches: list[str] | None = None) -> None:
        self.mismatches = mismatches or []
        detail = "" if not self.mismatches else ": " + "; ".join(self.mismatches)
        super().__init__(message + detail)


class DivergenceError(SGDFuseError, ArithmeticError):
    """Training loss became NaN or infinite."""

    def __init__(self, step: int, stage: str) -> None:
        self.step = step
        self.stage = stage
        super().__init__(f"{stage} loss diverged at step {step}")


class SamplingError(SGDFuseError):
    """The denoiser failed inside a reverse diffusion chain."""

    def __init__(self, step: int) -> None:
        self.step = step
        super().__init__(f"Denoiser failed at reverse step t={step}")


class MissingFusedError(SGDFuseError):
    """An evaluation found dataset ids without a fused image."""

    def __init__(self, ids: list[str]) -> None:
        self.ids = list(ids)
        super().__init__(f"{len(self.ids)} fused images missing: {', '.join(self.ids)}")

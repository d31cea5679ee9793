"""Metric report models."""

import math

from pydantic import BaseModel, Field, field_validator

METRIC_NAMES: tuple[str, ...] = ("EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf")


class ImageMetrics(BaseModel):
    """The seven fusion metrics for one image."""

    id: str
    EN: float
    SD: float
    SF: float
    MI: float
    SCD: float
    VIF: float
    Qabf: float

    @field_validator(*METRIC_NAMES)
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("metric values must be finite")
        return v

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


class MetricReport(BaseModel):
    """Per-image metrics, their means and missing ids."""

    per_image: list[ImageMetrics] = Field(default_factory=list)
    missing: list[str] = Field(default_factory=list, description="Ids with no fused image")

    @property
    def count(self) -> int:
        return len(self.per_image)

    @property
    def aggregate(self) -> dict[str, float]:
        """Arithmetic mean of every metric over the evaluated images."""
        if not self.per_image:
            return dict.fromkeys(METRIC_NAMES, 0.0)
        return {
            name: math.fsum(getattr(m, name) for m in self.per_image) / len(self.per_image)
            for name in METRIC_NAMES
        }

    @property
    def complete(self) -> bool:
        return not self.missing

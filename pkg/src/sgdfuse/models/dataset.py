"""Dataset index models."""

from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Split(str, Enum):
    """Dataset split."""

    TRAIN = "train"
    TEST = "test"


class DatasetEntry(BaseModel):
    """One registered pair and its optional mask files."""

    id: str = Field(..., min_length=1, description="Shared file stem")
    ir_path: Path
    vis_path: Path
    m_ir_path: Path | None = None
    m_vis_path: Path | None = None
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)

    @property
    def has_masks(self) -> bool:
        return self.m_ir_path is not None and self.m_vis_path is not None


class DatasetIndex(BaseModel):
    """Immutable listing of a dataset root."""

    model_config = ConfigDict(frozen=True)

    root: Path
    split: Split = Split.TRAIN
    entries: list[DatasetEntry] = Field(default_factory=list)
    excluded: list[str] = Field(
        default_factory=list,
        description="Ids dropped because a required mask file was missing",
    )

    @model_validator(mode="after")
    def _sorted_unique(self) -> "DatasetIndex":
        ids = [e.id for e in self.entries]
        if ids != sorted(ids):
            raise ValueError("entries must be sorted by id")
        if len(set(ids)) != len(ids):
            raise ValueError("entry ids must be unique")
        return self

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

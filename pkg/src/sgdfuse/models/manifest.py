"""Run manifest model."""

from datetime import datetime, timezone
from typing import Any

from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    """A machine-readable record of one CLI run."""

    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    command: str
    config_digest: str
    seed: int
    checkpoints: dict[str, str] = Field(
        default_factory=dict,
        description="Checkpoint path -> git-style content hash",
    )
    output_hash: str | None = Field(default=None, description="Combined hash of written outputs")
    outputs: list[str] = Field(default_factory=list)
    wall_time_s: float = 0.0
    details: dict[str, Any] = Field(default_factory=dict)
    success: bool = True
    error_message: str | None = None

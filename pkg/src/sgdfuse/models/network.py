"""Hyperparameter models for the Stage-I network, the U-Net denoiser and HFAH."""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

MSFEM_KERNEL_SIZES: tuple[int, int, int, int] = (1, 3, 5, 7)


class MSFEMConfig(BaseModel):
    """Multi-scale feature enhancement stack for the infrared branch."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: int = Field(default=16, ge=1, description="Feature channels C")
    kernel_sizes: tuple[Literal[1], Literal[3], Literal[5], Literal[7]] = Field(
        default=MSFEM_KERNEL_SIZES,
        description="Parallel branch kernels; fixed",
    )
    repeats: int = Field(default=3, ge=1, description="Number of stacked modules")


class TBConfig(BaseModel):
    """Transformer-block stack for the visible branch."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    embed_dim: int = Field(default=16, ge=1)
    heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=2.0, gt=0.0)
    repeats: int = Field(default=3, ge=1)
    window: int = Field(default=8, ge=1, description="Square attention window size")

    @model_validator(mode="after")
    def _heads_divide_dim(self) -> "TBConfig":
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})"
            )
        return self


class Stage1Config(BaseModel):
    """Stage-I widths shared by both branches; repeat counts come from the ablation flags."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: int = Field(default=16, ge=4, description="Stem output width for IR and VIS")
    heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=2.0, gt=0.0)
    window: int = Field(default=8, ge=1)
    head_width: int = Field(default=16, ge=1, description="Hidden width of the fusion head")

    def msfem(self, repeats: int) -> MSFEMConfig:
        return MSFEMConfig(channels=self.channels, repeats=repeats)

    def tb(self, repeats: int) -> TBConfig:
        return TBConfig(
            embed_dim=self.channels,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            repeats=repeats,
            window=self.window,
        )


class UNetConfig(BaseModel):
    """Noise-predictor U-Net. ``depth`` counts resolution levels."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    in_channels: int = Field(default=5, ge=1)
    out_channels: int = Field(default=5, ge=1)
    depth: int = Field(default=5, ge=2)
    base_width: int = Field(default=32, ge=1)
    max_width: int = Field(default=256, ge=1)
    time_embed_dim: int = Field(default=64, ge=4)
    groups: int = Field(default=8, ge=1, description="GroupNorm groups (reduced when a width is not divisible)")

    @model_validator(mode="after")
    def _check(self) -> "UNetConfig":
        if self.out_channels != self.in_channels:
            raise ValueError("out_channels must equal in_channels")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        return self

    @property
    def stride(self) -> int:
        """Spatial divisibility required of every input."""
        return 2 ** (self.depth - 1)

    def widths(self) -> list[int]:
        return [min(self.base_width * 2**level, self.max_width) for level in range(self.depth)]


class HFAHConfig(BaseModel):
    """Hierarchical feature aggregation head over decoder taps (level 0 = full resolution)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tap_levels: tuple[int, ...] = Field(default=(0, 1, 2))
    head_width: int = Field(default=32, ge=1)
    head_layers: int = Field(default=2, ge=1, description="Hidden 3x3 conv layers before the output conv")
    attention_kernel: int = Field(default=7, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "HFAHConfig":
        if len(self.tap_levels) < 2:
            raise ValueError("HFAH needs at least 2 tap levels")
        if len(set(self.tap_levels)) != len(self.tap_levels):
            raise ValueError("tap_levels must be unique")
        if self.attention_kernel % 2 == 0:
            raise ValueError("attention_kernel must be odd")
        return self

"""Run configuration using pydantic-settings.

Values come from a TOML file, ``dotted.key=value`` overrides and ``SGDFUSE_*``
environment variables. Unknown keys are rejected everywhere.
"""

import hashlib
import json
import math

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from sgdfuse.errors import ConfigError
from sgdfuse.models.network import HFAHConfig, Stage1Config, UNetConfig

# Feature timesteps are quoted on a 1000-step schedule and rescaled to T.
REFERENCE_STEPS = 1000


class MaskKind(str, Enum):
    """Where a MaskPair comes from."""

    FILE = "file"
    SYNTHETIC = "synthetic"
    REMOTE = "remote"
    RANDOM_PATCH = "random_patch"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    """Dataset location and patch sampling."""

    root: Path = Path("data/train")
    patch_size: int = Field(default=64, ge=8, description="Training crop; 160 matches the full protocol")
    require_masks: bool = False
    num_workers: int = Field(default=0, ge=0)


class OptimizerConfig(_Section):
    """Adam settings shared by both stages."""

    kind: Literal["adam"] = "adam"
    lr: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=24, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)


class StageTrainingConfig(_Section):
    """Length and bookkeeping of one training stage."""

    epochs: int = Field(default=1, ge=0)
    max_steps: int | None = Field(default=None, ge=1, description="Caps the step count when set")
    log_every: int = Field(default=10, ge=1)
    checkpoint_every: int = Field(default=100, ge=1)


class ModelConfig(_Section):
    """Network hyperparameters."""

    stage1: Stage1Config = Field(default_factory=Stage1Config)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    hfah: HFAHConfig = Field(default_factory=HFAHConfig)


class DiffusionConfig(_Section):
    """Noise schedule and Stage-II inference mode."""

    T: int = Field(default=100, ge=1)
    beta_start: float = Field(default=1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(default=0.02, gt=0.0, lt=1.0)
    kind: Literal["linear"] = "linear"
    timesteps: list[int] = Field(
        default_factory=lambda: [5, 50, 100],
        description="HFAH feature timesteps on a 1000-step scale",
    )
    sampler: Literal["timesteps", "chain"] = "timesteps"
    t_start: int | None = Field(default=None, ge=1, description="Chain start; defaults to T")

    @model_validator(mode="after")
    def _check(self) -> "DiffusionConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        if not self.timesteps:
            raise ValueError("timesteps must not be empty")
        if any(t < 1 for t in self.timesteps):
            raise ValueError("timesteps must be >= 1")
        if self.t_start is not None and self.t_start > self.T:
            raise ValueError(f"t_start ({self.t_start}) exceeds T ({self.T})")
        return self

    def scaled_timesteps(self) -> list[int]:
        """Feature timesteps rescaled to this schedule's length."""
        return scale_timesteps(self.timesteps, self.T)

    @property
    def chain_start(self) -> int:
        return self.t_start if self.t_start is not None else self.T


class LossConfig(_Section):
    """Stage-II objective weights."""

    lambda1: float = Field(default=1.5, ge=0.0, description="Mask-guided intensity weight")
    lambda2: float = Field(default=1.0, ge=0.0, description="Mask-guided gradient weight")
    diffusion_weight: float = Field(default=1.0, ge=0.0, description="Weight of the noise-prediction loss")
    intensity_reference: Literal["per_channel", "luma"] = "per_channel"


class MaskConfig(_Section):
    """Mask source and its parameters."""

    source: MaskKind = MaskKind.SYNTHETIC
    q_ir: float = Field(default=0.9, gt=0.0, lt=1.0)
    q_vis: float = Field(default=0.9, gt=0.0, lt=1.0)
    endpoint: str | None = None
    timeout_s: float = Field(default=30.0, gt=0.0)
    fraction: float = Field(default=0.25, gt=0.0, le=1.0)
    seed: int = 0
    max_in_flight: int = Field(default=4, ge=1)
    fallback_to_synthetic: bool = True


class QabfConstants(_Section):
    """Sigmoid models of edge-strength and orientation preservation."""

    kappa_g: float = -15.0
    sigma_g: float = 0.5
    kappa_a: float = -22.0
    sigma_a: float = 0.8
    gamma_g: float | None = Field(default=None, description="Defaults to a perfect-transfer score of 1")
    gamma_a: float | None = Field(default=None, description="Defaults to a perfect-transfer score of 1")

    @property
    def gains(self) -> tuple[float, float]:
        g = self.gamma_g if self.gamma_g is not None else 1.0 + math.exp(self.kappa_g * (1.0 - self.sigma_g))
        a = self.gamma_a if self.gamma_a is not None else 1.0 + math.exp(self.kappa_a * (1.0 - self.sigma_a))
        return g, a


class VIFConstants(_Section):
    """Pixel-domain multi-scale VIF constants."""

    sigma_nsq: float = Field(default=2.0, gt=0.0)
    scales: int = Field(default=4, ge=1)
    variance_floor: float = Field(default=1e-10, gt=0.0)


class MetricsConfig(_Section):
    """Evaluation constants."""

    qabf: QabfConstants = Field(default_factory=QabfConstants)
    vif: VIFConstants = Field(default_factory=VIFConstants)
    jobs: int = Field(default=1, ge=1)


class AblationConfig(_Section):
    """Component switches for the ablation variants."""

    no_sam: bool = False
    no_ir_mask: bool = False
    no_vis_mask: bool = False
    no_stage1: bool = False
    no_stage2: bool = False
    no_diffusion: bool = False
    no_hfah: bool = False
    no_cross_fusion: bool = False
    msfem_repeats: int = Field(default=3, ge=1)
    tb_repeats: int = Field(default=3, ge=1)


class PathsConfig(_Section):
    """Output locations; relative paths resolve against ``workdir``."""

    workdir: Path = Path(".")
    checkpoint_dir: Path = Path("checkpoints")
    output_dir: Path = Path("fused")
    manifest_dir: Path = Path("manifests")

    def resolve(self, path: Path) -> Path:
        return path if path.is_absolute() else self.workdir / path


class RunConfig(BaseSettings):
    """Complete configuration of a training, fusion or evaluation run."""

    model_config = SettingsConfigDict(
        env_prefix="SGDFUSE_",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    seed: int = 0
    device: str = "cpu"
    mask_endpoint: str | None = Field(
        default=None,
        description="Mask service URL; set through SGDFUSE_MASK_ENDPOINT to override masks.endpoint",
    )

    data: DataConfig = Field(default_factory=DataConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    stage1: StageTrainingConfig = Field(default_factory=StageTrainingConfig)
    stage2: StageTrainingConfig = Field(default_factory=StageTrainingConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    losses: LossConfig = Field(default_factory=LossConfig)
    masks: MaskConfig = Field(default_factory=MaskConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "RunConfig":
        stride = self.model.unet.stride
        if self.data.patch_size % stride != 0:
            raise ValueError(
                f"patch_size {self.data.patch_size} must be divisible by the U-Net stride {stride}"
            )
        if max(self.model.hfah.tap_levels) >= self.model.unet.depth:
            raise ValueError("hfah.tap_levels must index existing decoder levels")
        if self.diffusion.sampler == "chain":
            top = max(self.diffusion.scaled_timesteps())
            if self.diffusion.chain_start < top:
                raise ValueError(
                    f"chain start {self.diffusion.chain_start} is below feature timestep {top}"
                )
        return self

    @property
    def effective_mask_endpoint(self) -> str | None:
        return self.mask_endpoint or self.masks.endpoint

    @property
    def mask_source(self) -> MaskKind:
        """Mask source after the ``no_sam`` ablation is applied."""
        return MaskKind.RANDOM_PATCH if self.ablation.no_sam else self.masks.source

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of this config."""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def scale_timesteps(timesteps: list[int], T: int) -> list[int]:
    """Rescale timesteps quoted on the reference schedule to ``T`` steps."""
    scaled = {min(T, max(1, round(t * T / REFERENCE_STEPS))) for t in timesteps}
    return sorted(scaled)


def parse_override(item: str) -> tuple[list[str], Any]:
    """Split ``a.b.c=value`` into a key path and a TOML-typed value."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Override must look like key=value: {item!r}")
    try:
        value: Any = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply dotted-key overrides to a nested config dict in place."""
    for item in overrides:
        keys, value = parse_override(item)
        node = data
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override {item!r} descends into non-table key {key!r}")
            node = child
        node[keys[-1]] = value
    return data


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Load a run config from TOML plus overrides.

    Args:
        path: Optional TOML file.
        overrides: ``dotted.key=value`` strings applied after the file.

    Returns:
        Validated RunConfig.

    Raises:
        ConfigError: If the file cannot be parsed or an override is malformed.
        pydantic.ValidationError: If the resulting values fail validation.
    """
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"Cannot load config {path}: {e}") from e
    apply_overrides(data, overrides or [])
    return RunConfig(**data)

"""Array-backed image value types and channel-packing rules.

Arrays are stored HxWxC as float64 and made read-only at construction.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import numpy.typing as npt
import torch

from sgdfuse.errors import ConfigError, DimensionError

FloatArray = npt.NDArray[np.float64]

MIN_SIDE = 8
RANGE_TOLERANCE = 1e-9
CONDITIONED_CHANNELS = 5
# [F1.r, F1.g, F1.b, M_ir, M_vis]
IMAGE_SLICE = slice(0, 3)
M_IR_CHANNEL = 3
M_VIS_CHANNEL = 4
# ITU-R BT.601
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ValueRange(str, Enum):
    """Value-range convention of an image."""

    UNIT = "unit"
    SIGNED = "signed"

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self is ValueRange.UNIT else (-1.0, 1.0)


class MaskProvenance(str, Enum):
    """Where a mask pair came from."""

    FILE = "file"
    SYNTHETIC = "synthetic"
    REMOTE = "remote"
    RANDOM_PATCH = "random_patch"


class FusedStage(str, Enum):
    """Which stage produced a fused image."""

    PRELIMINARY = "preliminary"
    FINAL = "final"


def _frozen(data: npt.ArrayLike) -> FloatArray:
    arr = np.array(data, dtype=np.float64, copy=True)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr.setflags(write=False)
    return arr


def _check_finite(arr: FloatArray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf values")


@dataclass(frozen=True)
class Image:
    """An HxWxC image with C in {1, 3}."""

    data: FloatArray
    value_range: ValueRange = ValueRange.UNIT

    def __post_init__(self) -> None:
        arr = _frozen(self.data)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "value_range", ValueRange(self.value_range))
        if arr.ndim != 3:
            raise DimensionError(f"Image must be HxW or HxWxC, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise DimensionError(f"Image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        if c not in (1, 3):
            raise DimensionError(f"Image must have 1 or 3 channels, got {c}")
        _check_finite(arr, "Image")
        lo, hi = self.value_range.bounds
        if arr.min() < lo - RANGE_TOLERANCE or arr.max() > hi + RANGE_TOLERANCE:
            raise ValueError(
                f"Image values [{arr.min():.4g}, {arr.max():.4g}] outside {self.value_range.value} range"
            )

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    @property
    def size(self) -> tuple[int, int]:
        """(H, W)."""
        return int(self.data.shape[0]), int(self.data.shape[1])

    def crop(self, top: int, left: int, height: int, width: int) -> "Image":
        return Image(self.data[top : top + height, left : left + width], self.value_range)


@dataclass(frozen=True)
class ImagePair:
    """A registered infrared (1 channel) and visible (3 channel) pair."""

    ir: Image
    vis: Image
    id: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("ImagePair id must be non-empty")
        if self.ir.channels != 1:
            raise DimensionError(f"IR image must have 1 channel, got {self.ir.channels}")
        if self.vis.channels != 3:
            raise DimensionError(f"VIS image must have 3 channels, got {self.vis.channels}")
        if self.ir.size != self.vis.size:
            raise DimensionError(f"IR {self.ir.size} and VIS {self.vis.size} sizes differ")

    @property
    def size(self) -> tuple[int, int]:
        return self.ir.size


@dataclass(frozen=True)
class MaskPair:
    """Semantic masks for both modalities, soft values in [0, 1]."""

    m_ir: Image
    m_vis: Image
    provenance: MaskProvenance

    def __post_init__(self) -> None:
        object.__setattr__(self, "provenance", MaskProvenance(self.provenance))
        for name, mask in (("m_ir", self.m_ir), ("m_vis", self.m_vis)):
            if mask.channels != 1:
                raise DimensionError(f"{name} must have 1 channel, got {mask.channels}")
            if mask.value_range is not ValueRange.UNIT:
                raise ValueError(f"{name} must be in the unit range")
        if self.m_ir.size != self.m_vis.size:
            raise DimensionError(f"Mask sizes differ: {self.m_ir.size} vs {self.m_vis.size}")

    @property
    def size(self) -> tuple[int, int]:
        return self.m_ir.size

    def check_matches(self, pair: ImagePair) -> None:
        """Raise DimensionError unless the masks cover the pair exactly."""
        if self.size != pair.size:
            raise DimensionError(
                f"Masks {self.size} do not match pair '{pair.id}' of size {pair.size}"
            )


@dataclass(frozen=True)
class FusedImage:
    """A 3-channel fused output in [0, 1]."""

    data: FloatArray
    stage: FusedStage

    def __post_init__(self) -> None:
        arr = _frozen(self.data)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "stage", FusedStage(self.stage))
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimensionError(f"FusedImage must be HxWx3, got {arr.shape}")
        _check_finite(arr, "FusedImage")
        if arr.min() < -RANGE_TOLERANCE or arr.max() > 1.0 + RANGE_TOLERANCE:
            raise ValueError("FusedImage values outside [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])


@dataclass(frozen=True)
class ConditionedSample:
    """Five-channel diffusion state: signed F1 RGB followed by both masks."""

    data: FloatArray
    layout: tuple[str, ...] = field(default=("f1_r", "f1_g", "f1_b", "m_ir", "m_vis"))

    def __post_init__(self) -> None:
        arr = _frozen(self.data)
        object.__setattr__(self, "data", arr)
        if arr.ndim != 3 or arr.shape[2] != CONDITIONED_CHANNELS:
            raise DimensionError(f"ConditionedSample must be HxWx5, got {arr.shape}")
        _check_finite(arr, "ConditionedSample")
        img = arr[:, :, IMAGE_SLICE]
        masks = arr[:, :, M_IR_CHANNEL:]
        if np.abs(img).max() > 1.0 + RANGE_TOLERANCE:
            raise ValueError("ConditionedSample image channels outside [-1, 1]")
        if masks.min() < -RANGE_TOLERANCE or masks.max() > 1.0 + RANGE_TOLERANCE:
            raise ValueError("ConditionedSample mask channels outside [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])


def normalize(img: Image, target: ValueRange | str) -> Image:
    """Affine remap between the unit and signed ranges.

    Raises:
        ConfigError: If ``target`` is not a known range tag.
    """
    try:
        target = ValueRange(target)
    except ValueError as e:
        raise ConfigError(f"Unknown value range: {target!r}") from e
    if target is img.value_range:
        return img
    if target is ValueRange.SIGNED:
        return Image(np.clip(img.data * 2.0 - 1.0, -1.0, 1.0), ValueRange.SIGNED)
    return Image(np.clip((img.data + 1.0) / 2.0, 0.0, 1.0), ValueRange.UNIT)


def to_conditioned_sample(f1: FusedImage, masks: MaskPair) -> ConditionedSample:
    """Stack F1 (remapped to [-1, 1]) with both masks into a five-channel sample."""
    if f1.stage is not FusedStage.PRELIMINARY:
        raise ValueError("to_conditioned_sample expects a preliminary fused image")
    if f1.size != masks.size:
        raise DimensionError(f"F1 {f1.size} and masks {masks.size} sizes differ")
    stacked = np.concatenate(
        [f1.data * 2.0 - 1.0, masks.m_ir.data, masks.m_vis.data], axis=2
    )
    return ConditionedSample(stacked)


def split_conditioned_sample(
    sample: ConditionedSample, provenance: MaskProvenance = MaskProvenance.FILE
) -> tuple[FusedImage, MaskPair]:
    """Inverse of to_conditioned_sample."""
    arr = sample.data
    f1 = FusedImage(np.clip((arr[:, :, IMAGE_SLICE] + 1.0) / 2.0, 0.0, 1.0), FusedStage.PRELIMINARY)
    masks = MaskPair(
        Image(arr[:, :, M_IR_CHANNEL]),
        Image(arr[:, :, M_VIS_CHANNEL]),
        provenance,
    )
    return f1, masks


def to_tensor(arr: FloatArray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HxWxC array to a 1xCxHxW tensor."""
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def from_tensor(tensor: torch.Tensor) -> FloatArray:
    """1xCxHxW (or CxHxW) tensor to an HxWxC float64 array."""
    t = tensor.detach().to("cpu", torch.float64)
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise DimensionError(f"Expected a single-item batch, got {tuple(t.shape)}")
        t = t[0]
    return t.permute(1, 2, 0).numpy().copy()


def pair_tensors(pair: ImagePair, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """(ir, vis) as 1x1xHxW and 1x3xHxW tensors."""
    return to_tensor(pair.ir.data, dtype), to_tensor(pair.vis.data, dtype)


def mask_tensors(masks: MaskPair, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    return to_tensor(masks.m_ir.data, dtype), to_tensor(masks.m_vis.data, dtype)


def luma(rgb: FloatArray) -> FloatArray:
    """BT.601 luminance of an HxWx3 array, shape HxW."""
    return np.asarray(rgb[:, :, :3] @ LUMA_WEIGHTS, dtype=np.float64)

"""Training objectives for both stages.

All tensors are BxCxHxW in [0, 1]. Single-channel IR is broadcast to three
channels wherever it is compared with a colour image. Reductions are means
over every element.
"""

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F

from sgdfuse.errors import ConfigError, DimensionError

IntensityReference = Literal["per_channel", "luma"]

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64)
_LUMA = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)


def _check_spatial(*tensors: torch.Tensor) -> None:
    shapes = {(t.shape[0], *t.shape[-2:]) for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"Loss inputs are not aligned: {[tuple(t.shape) for t in tensors]}")


def grad_operator(img: torch.Tensor) -> torch.Tensor:
    """Per-channel Sobel gradient magnitude with replicate padding (unnormalized kernels)."""
    c = img.shape[1]
    kx = _SOBEL_X.to(device=img.device, dtype=img.dtype)
    weight = torch.stack([kx, kx.t()]).unsqueeze(1).repeat(c, 1, 1, 1)
    padded = F.pad(img, (1, 1, 1, 1), mode="replicate")
    responses = F.conv2d(padded, weight, groups=c)
    gx, gy = responses[:, 0::2], responses[:, 1::2]
    sq = gx * gx + gy * gy
    positive = sq > 0
    # sqrt has an infinite derivative at 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(sq))


def _broadcast_ir(ir: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return ir.expand(-1, like.shape[1], -1, -1)


def stage1_loss(
    f1: torch.Tensor, ir: torch.Tensor, vis: torch.Tensor
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Gradient loss against VIS plus intensity loss against IR."""
    _check_spatial(f1, ir, vis)
    if f1.shape != vis.shape:
        raise DimensionError(f"F1 {tuple(f1.shape)} and VIS {tuple(vis.shape)} differ")
    l_grad = (grad_operator(f1) - grad_operator(vis)).abs().mean()
    l_int = (f1 - _broadcast_ir(ir, f1)).abs().mean()
    return l_grad + l_int, {"grad": l_grad, "int": l_int}


def joint_mask(m_ir: torch.Tensor, m_vis: torch.Tensor) -> torch.Tensor:
    """Elementwise max of the two masks."""
    return torch.maximum(m_ir, m_vis)


def intensity_target(
    ir: torch.Tensor, vis: torch.Tensor, reference: IntensityReference = "per_channel"
) -> torch.Tensor:
    """max(I_ir, I_vis) per RGB channel, or against VIS luma when ``reference='luma'``."""
    if reference == "per_channel":
        return torch.maximum(_broadcast_ir(ir, vis), vis)
    if reference == "luma":
        weights = _LUMA.to(device=vis.device, dtype=vis.dtype).view(1, 3, 1, 1)
        y = (vis * weights).sum(dim=1, keepdim=True)
        return torch.maximum(ir, y).expand_as(vis)
    raise ConfigError(f"Unknown intensity reference: {reference!r}")


def mask_int_loss(
    i_f: torch.Tensor,
    ir: torch.Tensor,
    vis: torch.Tensor,
    mask: torch.Tensor,
    reference: IntensityReference = "per_channel",
) -> torch.Tensor:
    """Mask-weighted L1 distance to the brighter source."""
    _check_spatial(i_f, ir, vis, mask)
    return (mask * (i_f - intensity_target(ir, vis, reference))).abs().mean()


def mask_grad_loss(
    i_f: torch.Tensor, ir: torch.Tensor, vis: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mask-weighted L1 distance to the stronger source gradient."""
    _check_spatial(i_f, ir, vis, mask)
    target = torch.maximum(_broadcast_ir(grad_operator(ir), i_f), grad_operator(vis))
    return (mask * (grad_operator(i_f) - target)).abs().mean()


@dataclass(frozen=True)
class LossWeights:
    """Weights of the mask-guided intensity and gradient terms."""

    lambda1: float = 1.5
    lambda2: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"Loss weights must be >= 0, got {self.lambda1}, {self.lambda2}")

    def combine(self, int_part: torch.Tensor, grad_part: torch.Tensor) -> torch.Tensor:
        """lambda1 * intensity + lambda2 * gradient."""
        return self.lambda1 * int_part + self.lambda2 * grad_part


def stage2_loss(
    i_f: torch.Tensor,
    ir: torch.Tensor,
    vis: torch.Tensor,
    m_ir: torch.Tensor,
    m_vis: torch.Tensor,
    weights: LossWeights,
    reference: IntensityReference = "per_channel",
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted mask-guided intensity and gradient losses (no diffusion term)."""
    mask = joint_mask(m_ir, m_vis)
    l_int = mask_int_loss(i_f, ir, vis, mask, reference)
    l_grad = mask_grad_loss(i_f, ir, vis, mask)
    total = weights.combine(l_int, l_grad)
    return total, {"int": l_int, "grad": l_grad}

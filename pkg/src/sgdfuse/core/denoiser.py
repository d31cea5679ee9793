"""Time-conditioned U-Net noise predictor and the hierarchical aggregation head.

The U-Net returns its noise prediction together with the decoder feature maps
of every level (level 0 is full resolution). The head weights selected levels
by spatial attention, averages them over timesteps and maps them to the final
fused image.
"""

import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

from sgdfuse.core.diffusion import NoiseSchedule, q_sample, sample_chain
from sgdfuse.core.stage1 import check_finite
from sgdfuse.errors import ConfigError, DimensionError
from sgdfuse.models.image import (
    IMAGE_SLICE,
    ConditionedSample,
    FusedImage,
    FusedStage,
    from_tensor,
    to_tensor,
)
from sgdfuse.models.network import HFAHConfig, UNetConfig

logger = logging.getLogger(__name__)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Raw [sin | cos] embedding of integer timesteps, shape Bxdim."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding followed by a 2-layer MLP."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.SiLU(),
            nn.Linear(dim * 4, dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.dim).to(dtype))


def _groups(groups: int, channels: int) -> int:
    return math.gcd(groups, channels)


class ResBlock(nn.Module):
    """Two GroupNorm/SiLU/conv stages with an additive time bias and a skip."""

    def __init__(self, dim: int, dim_out: int, time_dim: int, groups: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(groups, dim), dim)
        self.conv1 = nn.Conv2d(dim, dim_out, 3, padding=1)
        self.time = nn.Linear(time_dim, dim_out)
        self.norm2 = nn.GroupNorm(_groups(groups, dim_out), dim_out)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, padding=1)
        self.skip = nn.Conv2d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Upsample(nn.Module):
    def __init__(self, dim: int, dim_out: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(dim, dim_out, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Noise predictor over ``depth`` resolution levels."""

    def __init__(self, cfg: UNetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.widths = widths
        tdim = cfg.time_embed_dim
        self.time_embed = TimeEmbedding(tdim)
        self.stem = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for level, width in enumerate(widths):
            self.down_blocks.append(ResBlock(prev, width, tdim, cfg.groups))
            if level < cfg.depth - 1:
                self.downsamples.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            prev = width

        self.mid = ResBlock(widths[-1], widths[-1], tdim, cfg.groups)

        self.upsamples = nn.ModuleList(
            Upsample(widths[level + 1], widths[level]) for level in range(cfg.depth - 1)
        )
        self.up_blocks = nn.ModuleList(
            ResBlock(2 * width, width, tdim, cfg.groups) for width in widths
        )

        self.head_norm = nn.GroupNorm(_groups(cfg.groups, widths[0]), widths[0])
        self.head_conv = nn.Conv2d(widths[0], cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return (eps_hat, decoder features ordered by level, 0 = full resolution)."""
        h_in, w_in = x.shape[-2:]
        stride = self.cfg.stride
        if h_in % stride or w_in % stride:
            raise DimensionError(f"Input {h_in}x{w_in} is not divisible by the U-Net stride {stride}")
        if x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"Expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        temb = self.time_embed(t)

        h = self.stem(x)
        skips: list[torch.Tensor] = []
        for level, block in enumerate(self.down_blocks):
            h = block(h, temb)
            skips.append(h)
            if level < self.cfg.depth - 1:
                h = self.downsamples[level](h)

        h = self.mid(h, temb)

        features: list[torch.Tensor] = [h] * self.cfg.depth
        for level in reversed(range(self.cfg.depth)):
            if level < self.cfg.depth - 1:
                h = self.upsamples[level](h)
            h = self.up_blocks[level](torch.cat([h, skips[level]], dim=1), temb)
            features[level] = h

        eps_hat = self.head_conv(F.silu(self.head_norm(h)))
        return check_finite(eps_hat, "denoiser"), features


class SpatialAttention(nn.Module):
    """Channel mean/max pooling -> kxk conv -> sigmoid map."""

    def __init__(self, kernel: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class HFAH(nn.Module):
    """Hierarchical feature aggregation head."""

    def __init__(self, cfg: HFAHConfig, unet_widths: list[int]) -> None:
        super().__init__()
        if max(cfg.tap_levels) >= len(unet_widths):
            raise ConfigError(
                f"HFAH taps {cfg.tap_levels} exceed the {len(unet_widths)} decoder levels"
            )
        self.cfg = cfg
        self.attention = nn.ModuleDict(
            {str(level): SpatialAttention(cfg.attention_kernel) for level in cfg.tap_levels}
        )
        in_channels = sum(unet_widths[level] for level in cfg.tap_levels)
        layers: list[nn.Module] = []
        for _ in range(cfg.head_layers):
            layers += [nn.Conv2d(in_channels, cfg.head_width, 3, padding=1), nn.SiLU()]
            in_channels = cfg.head_width
        layers.append(nn.Conv2d(in_channels, 3, 3, padding=1))
        self.head = nn.Sequential(*layers)

    def weigh(
        self, per_timestep: list[list[torch.Tensor]]
    ) -> tuple[list[torch.Tensor], dict[int, list[torch.Tensor]]]:
        """Attention-weighted taps (averaged over timesteps) and the attention maps.

        Raises:
            ConfigError: If no timestep is given or a tap level is missing.
        """
        if not per_timestep:
            raise ConfigError("HFAH needs features from at least one timestep")
        needed = max(self.cfg.tap_levels) + 1
        if any(len(feats) < needed for feats in per_timestep):
            raise ConfigError(f"HFAH needs decoder features for levels {self.cfg.tap_levels}")
        size = per_timestep[0][0].shape[-2:]
        maps: dict[int, list[torch.Tensor]] = {level: [] for level in self.cfg.tap_levels}
        taps: list[torch.Tensor] = []
        for level in self.cfg.tap_levels:
            weighted = []
            for feats in per_timestep:
                f = feats[level]
                if f.shape[-2:] != size:
                    f = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
                a = self.attention[str(level)](f)
                maps[level].append(a)
                weighted.append(f * a)
            taps.append(torch.stack(weighted).mean(dim=0))
        return taps, maps

    def forward(self, per_timestep: list[list[torch.Tensor]]) -> torch.Tensor:
        """Aggregate decoder features from one or more timesteps into Bx3xHxW in [0, 1]."""
        taps, _ = self.weigh(per_timestep)
        return (torch.tanh(self.head(torch.cat(taps, dim=1))) + 1.0) / 2.0


class Stage2Model(nn.Module):
    """U-Net plus HFAH bound to a schedule and a feature timestep set."""

    def __init__(
        self,
        unet_cfg: UNetConfig,
        hfah_cfg: HFAHConfig,
        sched: NoiseSchedule,
        timesteps: list[int],
        use_hfah: bool = True,
        use_diffusion: bool = True,
    ) -> None:
        super().__init__()
        self.unet = UNet(unet_cfg)
        self.hfah = HFAH(hfah_cfg, self.unet.widths)
        self.sched = sched
        self.timesteps = list(timesteps)
        self.use_hfah = use_hfah
        self.use_diffusion = use_diffusion

    def denoise(self, x: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        eps_hat, features = self.unet(x, t)
        return eps_hat, features

    def _x0_estimate(self, x_t: torch.Tensor, t: int, eps_hat: torch.Tensor) -> torch.Tensor:
        if not self.use_diffusion:
            return x_t - eps_hat
        ab = self.sched.alpha_bar[t - 1].item()
        return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)

    def fuse_tensor(
        self,
        condition: torch.Tensor,
        timesteps: list[int] | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Bx5xHxW condition -> Bx3xHxW final fused image in [0, 1].

        Each timestep gets a fresh noise draw from ``generator``.
        """
        steps = self.timesteps if timesteps is None else list(timesteps)
        if not steps:
            raise ConfigError("fused_from_timesteps needs at least one timestep")
        per_timestep: list[list[torch.Tensor]] = []
        x0_images: list[torch.Tensor] = []
        for t in steps:
            if self.use_diffusion:
                eps = torch.randn(condition.shape, generator=generator, dtype=condition.dtype)
                x_t = q_sample(condition, t, eps.to(condition.device), self.sched)
            else:
                x_t = condition
            t_batch = torch.full((condition.shape[0],), t, dtype=torch.long, device=condition.device)
            eps_hat, features = self.unet(x_t, t_batch)
            per_timestep.append(features)
            if not self.use_hfah:
                x0_images.append(self._x0_estimate(x_t, t, eps_hat)[:, IMAGE_SLICE])
        if self.use_hfah:
            return self.hfah(per_timestep)
        x0 = torch.stack(x0_images).mean(dim=0).clamp(-1.0, 1.0)
        return (x0 + 1.0) / 2.0

    def fuse_chain(self, condition: torch.Tensor, t_start: int, rng_seed: int) -> torch.Tensor:
        """Run the reverse chain and aggregate the features it records."""
        result = sample_chain(
            condition, t_start, self.denoise, self.sched, rng_seed, record_at=self.timesteps
        )
        if not self.use_hfah:
            return ((result.sample[:, IMAGE_SLICE].clamp(-1.0, 1.0)) + 1.0) / 2.0
        missing = [t for t in self.timesteps if t not in result.trace]
        if missing:
            raise ConfigError(f"Chain from t={t_start} never reached feature timesteps {missing}")
        return self.hfah([result.trace[t] for t in sorted(result.trace, reverse=True)])


def fused_from_timesteps(
    condition: ConditionedSample,
    timesteps: list[int],
    model: Stage2Model,
    rng_seed: int,
) -> FusedImage:
    """Final fused image of one conditioned sample, computed in eval mode.

    Raises:
        ConfigError: If ``timesteps`` is empty.
    """
    if not timesteps:
        raise ConfigError("fused_from_timesteps needs at least one timestep")
    param = next(model.parameters())
    generator = torch.Generator().manual_seed(rng_seed)
    model.eval()
    with torch.no_grad():
        fused = model.fuse_tensor(
            to_tensor(condition.data, param.dtype).to(param.device), timesteps, generator
        )
    return FusedImage(from_tensor(fused), FusedStage.FINAL)

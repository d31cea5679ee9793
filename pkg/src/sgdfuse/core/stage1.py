"""Stage-I fusion network.

IR features pass through a stack of multi-scale enhancement modules, VIS
features through windowed transformer blocks; a bidirectional cross-attention
pathway and a small conv head then produce the preliminary fused image F1.
"""

import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

from sgdfuse.errors import DimensionError, NumericalError
from sgdfuse.models.image import FusedImage, FusedStage, ImagePair, from_tensor, pair_tensors
from sgdfuse.models.network import MSFEMConfig, Stage1Config, TBConfig

logger = logging.getLogger(__name__)


def check_finite(tensor: torch.Tensor, stage: str) -> torch.Tensor:
    """Raise NumericalError if ``tensor`` holds NaN or Inf."""
    if not torch.isfinite(tensor).all():
        raise NumericalError(stage)
    return tensor


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class MSFEM(nn.Module):
    """Multi-scale feature enhancement module.

    Parallel 1/3/5/7 convs; the 3/5/7 responses are concatenated and refined by
    DW3x3 -> 1x1 -> DW3x3, joined with the 1x1 response, projected by a 1x1 conv
    and gated by a sigmoid that is added back to the input.
    """

    def __init__(self, cfg: MSFEMConfig) -> None:
        super().__init__()
        c = cfg.channels
        self.branches = nn.ModuleList(
            nn.Conv2d(c, c, k, padding=k // 2) for k in cfg.kernel_sizes
        )
        self.dw_in = nn.Conv2d(3 * c, 3 * c, 3, padding=1, groups=3 * c)
        self.pw = nn.Conv2d(3 * c, c, 1)
        self.dw_out = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.gate = nn.Conv2d(2 * c, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f1, f2, f3, f4 = (branch(x) for branch in self.branches)
        multi = torch.cat([f2, f3, f4], dim=1)
        enhanced = self.dw_out(self.pw(self.dw_in(multi)))
        joined = torch.cat([f1, enhanced], dim=1)
        return x + torch.sigmoid(self.gate(joined))


def _window_size(h: int, w: int, window: int) -> int:
    return max(1, min(window, h, w))


def _pad_to_window(x: torch.Tensor, ws: int) -> tuple[torch.Tensor, int, int]:
    """Reflect-pad a BxCxHxW map so both sides are multiples of ``ws``."""
    h, w = x.shape[-2:]
    pad_h = (ws - h % ws) % ws
    pad_w = (ws - w % ws) % ws
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    return x, h, w


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """BxCxHxW -> (B*nW)x(ws*ws)xC token windows."""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // ws, ws, w // ws, ws)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)


def window_merge(tokens: torch.Tensor, ws: int, b: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition."""
    c = tokens.shape[-1]
    x = tokens.reshape(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


class WindowAttention(nn.Module):
    """Multi-head attention over token windows; queries and keys may differ."""

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        if dim % heads != 0:
            raise DimensionError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        n, tokens, dim = t.shape
        return t.reshape(n, tokens, self.heads, dim // self.heads).transpose(1, 2)

    def forward(
        self, x: torch.Tensor, context: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (projected output, attention weights NxHeadsxQxK)."""
        ctx = x if context is None else context
        q = self._split(self.q(x))
        k = self._split(self.k(ctx))
        v = self._split(self.v(ctx))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out), attn


class TransformerBlock(nn.Module):
    """Pre-norm windowed self-attention block with an MLP, both residual."""

    def __init__(self, cfg: TBConfig) -> None:
        super().__init__()
        dim = cfg.embed_dim
        hidden = max(1, int(round(dim * cfg.mlp_ratio)))
        self.window = cfg.window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, cfg.heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(
        self, x: torch.Tensor, return_attention: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        b, _, h, w = x.shape
        ws = _window_size(h, w, self.window)
        padded, h, w = _pad_to_window(x, ws)
        hp, wp = padded.shape[-2:]
        tokens = window_partition(padded, ws)
        attended, attn = self.attn(self.norm1(tokens))
        tokens = tokens + attended
        tokens = tokens + self.mlp(self.norm2(tokens))
        out = window_merge(tokens, ws, b, hp, wp)[:, :, :h, :w]
        if return_attention:
            return out, attn
        return out


class CrossFusion(nn.Module):
    """Bidirectional windowed cross-attention followed by a sigmoid conv head.

    With ``interaction=False`` the attention pathway is skipped and the head
    sees the branch features unchanged.
    """

    def __init__(
        self, channels: int, heads: int, window: int, head_width: int, interaction: bool = True
    ) -> None:
        super().__init__()
        self.window = window
        self.interaction = interaction
        self.norm_ir = nn.LayerNorm(channels)
        self.norm_vis = nn.LayerNorm(channels)
        self.ir_from_vis = WindowAttention(channels, heads)
        self.vis_from_ir = WindowAttention(channels, heads)
        self.head = nn.Sequential(
            nn.Conv2d(2 * channels, head_width, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(head_width, 3, 3, padding=1),
        )

    def interact(self, f_ir: torch.Tensor, f_vis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """IR tokens query VIS tokens and vice versa; both updates are residual."""
        if f_ir.shape != f_vis.shape:
            raise DimensionError(
                f"IR features {tuple(f_ir.shape)} and VIS features {tuple(f_vis.shape)} differ"
            )
        if not self.interaction:
            return f_ir, f_vis
        b, _, h, w = f_ir.shape
        ws = _window_size(h, w, self.window)
        ir_pad, h, w = _pad_to_window(f_ir, ws)
        vis_pad, _, _ = _pad_to_window(f_vis, ws)
        hp, wp = ir_pad.shape[-2:]
        ir_tok = window_partition(ir_pad, ws)
        vis_tok = window_partition(vis_pad, ws)
        ir_n, vis_n = self.norm_ir(ir_tok), self.norm_vis(vis_tok)
        ir_upd, _ = self.ir_from_vis(ir_n, vis_n)
        vis_upd, _ = self.vis_from_ir(vis_n, ir_n)
        ir_out = window_merge(ir_tok + ir_upd, ws, b, hp, wp)[:, :, :h, :w]
        vis_out = window_merge(vis_tok + vis_upd, ws, b, hp, wp)[:, :, :h, :w]
        return ir_out, vis_out

    def forward(self, f_ir: torch.Tensor, f_vis: torch.Tensor) -> torch.Tensor:
        ir_out, vis_out = self.interact(f_ir, f_vis)
        return torch.sigmoid(self.head(torch.cat([ir_out, vis_out], dim=1)))


class Stage1Net(nn.Module):
    """IR/VIS stems, MSFEM and TB stacks, cross fusion."""

    def __init__(
        self,
        cfg: Stage1Config,
        msfem_repeats: int = 3,
        tb_repeats: int = 3,
        cross_fusion: bool = True,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.ir_stem = nn.Conv2d(1, c, 3, padding=1)
        self.vis_stem = nn.Conv2d(3, c, 3, padding=1)
        self.msfem = nn.ModuleList(MSFEM(cfg.msfem(msfem_repeats)) for _ in range(msfem_repeats))
        self.tb = nn.ModuleList(TransformerBlock(cfg.tb(tb_repeats)) for _ in range(tb_repeats))
        self.fusion = CrossFusion(c, cfg.heads, cfg.window, cfg.head_width, cross_fusion)

    def encode(self, ir: torch.Tensor, vis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if ir.shape[-2:] != vis.shape[-2:]:
            raise DimensionError(f"IR {tuple(ir.shape)} and VIS {tuple(vis.shape)} sizes differ")
        f_ir = self.ir_stem(ir)
        for i, block in enumerate(self.msfem):
            f_ir = check_finite(block(f_ir), f"msfem[{i}]")
        f_vis = self.vis_stem(vis)
        for i, block in enumerate(self.tb):
            f_vis = check_finite(block(f_vis), f"tb[{i}]")
        return f_ir, f_vis

    def forward(self, ir: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        """Bx1xHxW IR and Bx3xHxW VIS -> Bx3xHxW F1 in [0, 1]."""
        f_ir, f_vis = self.encode(ir, vis)
        return check_finite(self.fusion(f_ir, f_vis), "cross_fuse")


def stage1_forward(pair: ImagePair, net: Stage1Net) -> FusedImage:
    """Preliminary fused image of one pair, computed in eval mode."""
    param = next(net.parameters())
    net.eval()
    ir, vis = pair_tensors(pair, param.dtype)
    with torch.no_grad():
        f1 = net(ir.to(param.device), vis.to(param.device))
    return FusedImage(from_tensor(f1), FusedStage.PRELIMINARY)

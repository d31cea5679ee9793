"""Two-stage training protocol, checkpointing and end-to-end fusion.

All randomness is derived from ``(seed, epoch)`` for data and ``(seed, step)``
for diffusion noise, so a run resumed from a checkpoint at step k replays the
remaining steps exactly.
"""

import logging
import math
from collections.abc import Callable
from pathlib import Path
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Subset

from sgdfuse.config import RunConfig
from sgdfuse.core.checkpoint import (
    Checkpoint,
    StageTag,
    capture,
    content_hash,
    load_checkpoint,
    load_into,
    save_checkpoint,
)
from sgdfuse.core.denoiser import Stage2Model
from sgdfuse.core.diffusion import (
    NoiseSchedule,
    diffusion_loss,
    make_schedule,
    q_sample,
    sample_timesteps,
)
from sgdfuse.core.ingest import FusionPatchDataset, load_pairs, save_png, scan_dataset
from sgdfuse.core.losses import LossWeights, stage1_loss, stage2_loss
from sgdfuse.core.masks import MaskProvider, drop_masks
from sgdfuse.core.stage1 import Stage1Net, stage1_forward
from sgdfuse.errors import CheckpointError, ConfigError, DivergenceError
from sgdfuse.models.dataset import DatasetIndex
from sgdfuse.models.image import (
    FusedImage,
    FusedStage,
    ImagePair,
    MaskPair,
    from_tensor,
    to_conditioned_sample,
    to_tensor,
)

logger = logging.getLogger(__name__)

StepFn = Callable[[dict[str, torch.Tensor], int], tuple[torch.Tensor, dict[str, torch.Tensor]]]
CheckpointKind = Literal["last", "best"]


def checkpoint_path(cfg: RunConfig, stage: StageTag, kind: CheckpointKind = "last") -> Path:
    return cfg.paths.resolve(cfg.paths.checkpoint_dir) / f"{stage.value}_{kind}.ckpt"


def step_seed(seed: int, step: int) -> int:
    """Seed of the noise drawn at one training step."""
    return (seed * 1_000_003 + step) % (2**63)


def build_stage1(cfg: RunConfig) -> Stage1Net:
    ab = cfg.ablation
    return Stage1Net(
        cfg.model.stage1, ab.msfem_repeats, ab.tb_repeats, cross_fusion=not ab.no_cross_fusion
    )


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end, d.kind)


def build_stage2(cfg: RunConfig) -> Stage2Model:
    return Stage2Model(
        cfg.model.unet,
        cfg.model.hfah,
        build_schedule(cfg),
        cfg.diffusion.scaled_timesteps(),
        use_hfah=not cfg.ablation.no_hfah,
        use_diffusion=not cfg.ablation.no_diffusion,
    )


def substitute_f1(ir: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
    """Stand-in for F1 when Stage I is ablated: mean of broadcast IR and VIS."""
    return 0.5 * (ir.expand(-1, vis.shape[1], -1, -1) + vis)


def _batch_order(n: int, seed: int, epoch: int) -> list[int]:
    g = torch.Generator().manual_seed(step_seed(seed, -1 - epoch))
    return [int(i) for i in torch.randperm(n, generator=g)]


def _load_dataset(cfg: RunConfig) -> tuple[DatasetIndex, list[ImagePair]]:
    index = scan_dataset(cfg.paths.resolve(cfg.data.root), require_masks=cfg.data.require_masks)
    return index, load_pairs(index, jobs=max(1, cfg.data.num_workers))


def _train_loop(
    cfg: RunConfig,
    stage: StageTag,
    module: nn.Module,
    trainable: list[nn.Parameter],
    dataset: FusionPatchDataset,
    step_fn: StepFn,
    resume: Checkpoint | None,
    metadata: dict[str, str],
) -> Checkpoint:
    stage_cfg = cfg.stage1 if stage is StageTag.STAGE1 else cfg.stage2
    opt = cfg.optimizer
    optimizer = torch.optim.Adam(trainable, lr=opt.lr, betas=(opt.beta1, opt.beta2))
    config_snapshot = cfg.model_dump(mode="json")

    history: list[dict[str, float]] = []
    best: float | None = None
    step = 0
    if resume is not None:
        load_into(module, resume, stage, optimizer)
        history = list(resume.history)
        best = resume.best_loss
        step = resume.step
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        logger.info(f"Resuming {stage.value} from step {step}")

    batch_size = min(opt.batch_size, len(dataset))
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total = stage_cfg.epochs * steps_per_epoch
    if stage_cfg.max_steps is not None:
        total = min(total, stage_cfg.max_steps)
    last_path = checkpoint_path(cfg, stage, "last")
    best_path = checkpoint_path(cfg, stage, "best")
    last_saved = step
    if resume is not None and step >= total:
        logger.info(f"{stage.value} already trained to step {step}; nothing to do")
        return resume

    def snapshot() -> Checkpoint:
        return capture(
            stage,
            module,
            optimizer,
            config=config_snapshot,
            step=step,
            history=list(history),
            best_loss=best,
            metadata=metadata,
        )

    module.train()
    while step < total:
        epoch = step // steps_per_epoch
        dataset.set_epoch(epoch)
        skip = (step - epoch * steps_per_epoch) * batch_size
        order = _batch_order(len(dataset), cfg.seed, epoch)[skip:]
        loader = DataLoader(
            Subset(dataset, order),
            batch_size=batch_size,
            shuffle=False,
            num_workers=cfg.data.num_workers,
        )
        for batch in loader:
            step += 1
            optimizer.zero_grad(set_to_none=True)
            loss, parts = step_fn(batch, step)
            value = float(loss.detach())
            if not math.isfinite(value):
                logger.error(f"{stage.value} loss is {value} at step {step}")
                raise DivergenceError(step, stage.value)
            loss.backward()
            optimizer.step()
            record = {"total": value, **{k: float(v.detach()) for k, v in parts.items()}}
            history.append(record)
            if step == 1 or step % stage_cfg.log_every == 0:
                detail = " ".join(f"{k}={v:.6f}" for k, v in record.items())
                logger.info(f"{stage.value} step {step}/{total} {detail}")

            if step % stage_cfg.checkpoint_every == 0 or step == total:
                window = [r["total"] for r in history[last_saved:step]]
                interval = math.fsum(window) / len(window)
                if best is None or interval < best:
                    best = interval
                    save_checkpoint(snapshot(), best_path)
                save_checkpoint(snapshot(), last_path)
                last_saved = step
            if step >= total:
                break

    return snapshot()


def train_stage1(cfg: RunConfig, resume: Path | None = None) -> Checkpoint:
    """Optimize the Stage-I network on the gradient + intensity objective.

    Args:
        cfg: Run configuration.
        resume: Checkpoint to continue from.

    Returns:
        The last checkpoint (also written to ``stage1_last.ckpt``).

    Raises:
        ConfigError: If Stage I is ablated.
        DivergenceError: If the loss becomes non-finite.
    """
    if cfg.ablation.no_stage1:
        raise ConfigError("train-stage1 is not available with ablation.no_stage1")
    torch.manual_seed(cfg.seed)
    device = torch.device(cfg.device)
    _, pairs = _load_dataset(cfg)
    net = build_stage1(cfg).to(device)
    dataset = FusionPatchDataset(pairs, cfg.data.patch_size, cfg.seed)
    resume_ckpt = load_checkpoint(resume) if resume is not None else None

    def step_fn(batch: dict[str, torch.Tensor], step: int) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        ir = batch["ir"].to(device)
        vis = batch["vis"].to(device)
        return stage1_loss(net(ir, vis), ir, vis)

    logger.info(f"Training stage1 on {len(pairs)} pairs, patch {cfg.data.patch_size}")
    return _train_loop(
        cfg, StageTag.STAGE1, net, list(net.parameters()), dataset, step_fn, resume_ckpt, {}
    )


def load_stage1(cfg: RunConfig, path: Path | None) -> tuple[Stage1Net, str]:
    """Frozen Stage-I network from ``path`` (default: the configured last checkpoint)."""
    path = path or checkpoint_path(cfg, StageTag.STAGE1, "last")
    net = build_stage1(cfg)
    load_into(net, load_checkpoint(path), StageTag.STAGE1)
    net.to(torch.device(cfg.device)).eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net, content_hash(path)


def _stage2_masks(cfg: RunConfig, index: DatasetIndex, pairs: list[ImagePair]) -> dict[str, MaskPair]:
    masks = MaskProvider.from_config(cfg).masks_for_all(pairs, list(index.entries))
    ab = cfg.ablation
    return {k: drop_masks(m, ab.no_ir_mask, ab.no_vis_mask) for k, m in masks.items()}


def train_stage2(
    cfg: RunConfig, stage1_ckpt: Path | None = None, resume: Path | None = None
) -> Checkpoint:
    """Optimize U-Net and HFAH with frozen Stage-I weights.

    The per-step objective is ``diffusion_weight * L_diff + L_stage2``; the
    diffusion term is dropped under ``ablation.no_diffusion``.

    Raises:
        CheckpointError: If the Stage-I checkpoint is missing or incompatible.
        DivergenceError: If the loss becomes non-finite.
    """
    torch.manual_seed(cfg.seed)
    device = torch.device(cfg.device)
    index, pairs = _load_dataset(cfg)

    stage1: Stage1Net | None = None
    metadata: dict[str, str] = {}
    if not cfg.ablation.no_stage1:
        stage1, digest = load_stage1(cfg, stage1_ckpt)
        metadata["stage1_hash"] = digest

    masks = _stage2_masks(cfg, index, pairs)
    model = build_stage2(cfg).to(device)
    sched = model.sched
    weights = LossWeights(cfg.losses.lambda1, cfg.losses.lambda2)
    use_diffusion = not cfg.ablation.no_diffusion
    dataset = FusionPatchDataset(
        pairs, cfg.data.patch_size, cfg.seed, masks=masks, multiple=cfg.model.unet.stride
    )
    resume_ckpt = load_checkpoint(resume) if resume is not None else None

    def step_fn(batch: dict[str, torch.Tensor], step: int) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        g = torch.Generator().manual_seed(step_seed(cfg.seed, step))
        ir, vis, m_ir, m_vis = (batch[k].to(device) for k in ("ir", "vis", "m_ir", "m_vis"))
        with torch.no_grad():
            f1 = stage1(ir, vis) if stage1 is not None else substitute_f1(ir, vis)
        condition = torch.cat([f1 * 2.0 - 1.0, m_ir, m_vis], dim=1)

        parts: dict[str, torch.Tensor] = {}
        total = torch.zeros((), device=device)
        if use_diffusion:
            t = sample_timesteps(condition.shape[0], sched.T, g).to(device)
            eps = torch.randn(condition.shape, generator=g, dtype=condition.dtype).to(device)
            eps_hat, _ = model.denoise(q_sample(condition, t, eps, sched), t)
            parts["diff"] = diffusion_loss(eps, eps_hat)
            total = total + cfg.losses.diffusion_weight * parts["diff"]
        i_f = model.fuse_tensor(condition, generator=g)
        l_stage2, s2_parts = stage2_loss(
            i_f, ir, vis, m_ir, m_vis, weights, cfg.losses.intensity_reference
        )
        parts["stage2"] = l_stage2
        parts.update(s2_parts)
        return total + l_stage2, parts

    logger.info(
        f"Training stage2 on {len(pairs)} pairs, timesteps {model.timesteps}, "
        f"hfah={model.use_hfah} diffusion={use_diffusion}"
    )
    return _train_loop(
        cfg, StageTag.STAGE2, model, list(model.parameters()), dataset, step_fn, resume_ckpt, metadata
    )


def _pad_to(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class FusionPipeline:
    """Stage I, optional Stage II and the ablation switches bound to one config."""

    def __init__(
        self,
        cfg: RunConfig,
        stage1: Stage1Net | None,
        stage2: Stage2Model | None,
        checkpoints: dict[str, str] | None = None,
    ) -> None:
        self.cfg = cfg
        self.stage1 = stage1
        self.stage2 = stage2
        self.checkpoints = checkpoints or {}

    @classmethod
    def from_checkpoints(
        cls,
        cfg: RunConfig,
        stage1_ckpt: Path | None = None,
        stage2_ckpt: Path | None = None,
    ) -> "FusionPipeline":
        """Load both stages, checking each checkpoint against ``cfg``.

        Raises:
            CheckpointError: If a needed checkpoint is missing or incompatible.
        """
        hashes: dict[str, str] = {}
        stage1 = None
        if not cfg.ablation.no_stage1:
            path = stage1_ckpt or checkpoint_path(cfg, StageTag.STAGE1, "last")
            stage1, hashes[str(path)] = load_stage1(cfg, path)
        stage2 = None
        if not cfg.ablation.no_stage2:
            path = stage2_ckpt or checkpoint_path(cfg, StageTag.STAGE2, "last")
            stage2 = build_stage2(cfg)
            load_into(stage2, load_checkpoint(path), StageTag.STAGE2)
            stage2.to(torch.device(cfg.device)).eval()
            hashes[str(path)] = content_hash(path)
        if stage1 is None and stage2 is None:
            raise CheckpointError("Both stages are ablated; nothing to fuse with")
        return cls(cfg, stage1, stage2, hashes)

    @property
    def needs_masks(self) -> bool:
        return self.stage2 is not None

    def preliminary(self, pair: ImagePair) -> FusedImage:
        if self.stage1 is not None:
            return stage1_forward(pair, self.stage1)
        ir = to_tensor(pair.ir.data, torch.float64)
        vis = to_tensor(pair.vis.data, torch.float64)
        return FusedImage(from_tensor(substitute_f1(ir, vis)), FusedStage.PRELIMINARY)

    def fuse(self, pair: ImagePair, masks: MaskPair | None = None) -> FusedImage:
        """Fuse one pair at its original resolution."""
        f1 = self.preliminary(pair)
        if self.stage2 is None:
            return f1
        if masks is None:
            raise ValueError("Stage II fusion needs a mask pair")
        masks.check_matches(pair)
        ab = self.cfg.ablation
        masks = drop_masks(masks, ab.no_ir_mask, ab.no_vis_mask)
        sample = to_conditioned_sample(f1, masks)
        param = next(self.stage2.parameters())
        h, w = sample.size
        condition = _pad_to(to_tensor(sample.data, param.dtype), self.cfg.model.unet.stride)
        condition = condition.to(param.device)
        seed = self.cfg.seed
        self.stage2.eval()
        with torch.no_grad():
            if self.cfg.diffusion.sampler == "chain":
                fused = self.stage2.fuse_chain(condition, self.cfg.diffusion.chain_start, seed)
            else:
                g = torch.Generator().manual_seed(seed)
                fused = self.stage2.fuse_tensor(condition, generator=g)
        return FusedImage(from_tensor(fused[:, :, :h, :w]).clip(0.0, 1.0), FusedStage.FINAL)


def fuse(
    cfg: RunConfig,
    ckpts: tuple[Path | None, Path | None],
    pair: ImagePair,
    masks: MaskPair | None = None,
) -> FusedImage:
    """End-to-end fusion of one pair from a (stage1, stage2) checkpoint pair."""
    return FusionPipeline.from_checkpoints(cfg, *ckpts).fuse(pair, masks)


def fuse_dataset(pipeline: FusionPipeline, data_root: Path, out_dir: Path) -> list[Path]:
    """Fuse every pair under ``data_root`` into ``out_dir/<id>.png``."""
    cfg = pipeline.cfg
    index = scan_dataset(data_root, require_masks=False)
    pairs = load_pairs(index, jobs=max(1, cfg.data.num_workers))
    masks: dict[str, MaskPair] = {}
    if pipeline.needs_masks:
        masks = MaskProvider.from_config(cfg).masks_for_all(pairs, list(index.entries))
    written: list[Path] = []
    for pair in pairs:
        fused = pipeline.fuse(pair, masks.get(pair.id))
        written.append(save_png(out_dir / f"{pair.id}.png", fused.data))
        logger.debug(f"Fused '{pair.id}' at {pair.size[0]}x{pair.size[1]}")
    logger.info(f"Wrote {len(written)} fused images to {out_dir}")
    return written

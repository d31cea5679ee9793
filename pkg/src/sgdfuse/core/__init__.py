"""Core fusion, diffusion, training and evaluation logic."""

from sgdfuse.core.checkpoint import Checkpoint, StageTag, load_checkpoint, save_checkpoint
from sgdfuse.core.denoiser import HFAH, Stage2Model, UNet, fused_from_timesteps
from sgdfuse.core.diffusion import NoiseSchedule, make_schedule, sample_chain
from sgdfuse.core.ingest import FusionPatchDataset, load_pairs, scan_dataset
from sgdfuse.core.losses import LossWeights, stage1_loss, stage2_loss
from sgdfuse.core.manifest import ManifestWriter
from sgdfuse.core.masks import MaskProvider, RemoteMaskClient, fetch_masks_remote
from sgdfuse.core.metrics import compare_reports, evaluate_all, read_report_csv, write_report_csv
from sgdfuse.core.stage1 import Stage1Net, stage1_forward
from sgdfuse.core.trainer import FusionPipeline, fuse, fuse_dataset, train_stage1, train_stage2

__all__ = [
    "HFAH",
    "Checkpoint",
    "FusionPatchDataset",
    "FusionPipeline",
    "LossWeights",
    "ManifestWriter",
    "MaskProvider",
    "NoiseSchedule",
    "RemoteMaskClient",
    "Stage1Net",
    "Stage2Model",
    "StageTag",
    "UNet",
    "compare_reports",
    "evaluate_all",
    "fetch_masks_remote",
    "fuse",
    "fuse_dataset",
    "fused_from_timesteps",
    "load_checkpoint",
    "load_pairs",
    "make_schedule",
    "read_report_csv",
    "sample_chain",
    "save_checkpoint",
    "scan_dataset",
    "stage1_forward",
    "stage1_loss",
    "stage2_loss",
    "train_stage1",
    "train_stage2",
    "write_report_csv",
]

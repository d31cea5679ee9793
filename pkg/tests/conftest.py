"""Pytest configuration and fixtures."""

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest
import torch

from sgdfuse.config import RunConfig, load_config
from sgdfuse.core.ingest import save_png
from sgdfuse.models.image import Image, ImagePair, MaskPair, MaskProvenance

DATASET_SIZE = (48, 48)


def _smooth_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Blob-like structure plus mild noise, in [0, 1]."""
    y, x = np.mgrid[0:height, 0:width] / max(height, width)
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    blob = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / 0.05)
    field = 0.6 * blob + 0.3 * x + 0.1 * rng.random((height, width))
    return np.clip(field, 0.0, 1.0)


def write_pair_files(
    root: Path,
    entry_id: str,
    rng: np.random.Generator,
    size: tuple[int, int] = DATASET_SIZE,
    masks: bool = False,
) -> None:
    """Write ir/, vis/ (and optionally masks_ir/, masks_vis/) PNGs for one id."""
    h, w = size
    ir = _smooth_field(rng, h, w)
    vis = np.stack([_smooth_field(rng, h, w) for _ in range(3)], axis=2)
    save_png(root / "ir" / f"{entry_id}.png", ir)
    save_png(root / "vis" / f"{entry_id}.png", vis)
    if masks:
        save_png(root / "masks_ir" / f"{entry_id}.png", (ir > 0.5).astype(np.float64))
        save_png(root / "masks_vis" / f"{entry_id}.png", (vis.mean(axis=2) > 0.5).astype(np.float64))


@pytest.fixture
def rng() -> np.random.Generator:
    """Deterministic numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch() -> None:
    torch.manual_seed(0)


@pytest.fixture
def sample_pair(rng: np.random.Generator) -> ImagePair:
    """A random 16x16 pair."""
    return ImagePair(
        ir=Image(rng.random((16, 16, 1))),
        vis=Image(rng.random((16, 16, 3))),
        id="sample",
    )


@pytest.fixture
def sample_masks(rng: np.random.Generator) -> MaskPair:
    """Soft random masks for sample_pair."""
    return MaskPair(
        Image(rng.random((16, 16))),
        Image(rng.random((16, 16))),
        MaskProvenance.SYNTHETIC,
    )


@pytest.fixture
def dataset_root(tmp_path: Path) -> Path:
    """Two 48x48 pairs with mask files under tmp_path/data."""
    root = tmp_path / "data"
    gen = np.random.default_rng(7)
    for entry_id in ("a", "b"):
        write_pair_files(root, entry_id, gen, masks=True)
    return root


def tiny_overrides(workdir: Path) -> list[str]:
    """Overrides for a model small enough to train in seconds on CPU."""
    return [
        f'paths.workdir="{workdir.as_posix()}"',
        'data.root="data"',
        "data.patch_size=16",
        "optimizer.batch_size=2",
        "optimizer.lr=0.001",
        "stage1.epochs=2",
        "stage2.epochs=2",
        "stage1.checkpoint_every=1",
        "stage2.checkpoint_every=1",
        "model.stage1.channels=4",
        "model.stage1.heads=2",
        "model.stage1.window=4",
        "model.stage1.head_width=4",
        "model.unet.depth=3",
        "model.unet.base_width=8",
        "model.unet.max_width=16",
        "model.unet.time_embed_dim=8",
        "model.unet.groups=4",
        "model.hfah.tap_levels=[0, 1]",
        "model.hfah.head_width=8",
        "model.hfah.head_layers=1",
        "model.hfah.attention_kernel=3",
        "diffusion.T=10",
        "diffusion.timesteps=[500, 1000]",
        "ablation.msfem_repeats=1",
        "ablation.tb_repeats=1",
    ]


@pytest.fixture
def make_config(tmp_path: Path) -> Callable[..., RunConfig]:
    """Factory for tiny run configs rooted at tmp_path; extra overrides win."""

    def _make(*extra: str) -> RunConfig:
        return load_config(None, tiny_overrides(tmp_path) + list(extra))

    return _make


@pytest.fixture
def tiny_config(make_config: Callable[..., RunConfig]) -> RunConfig:
    """Tiny run config with default ablation flags."""
    return make_config()

"""Dataset discovery, PNG I/O and aligned patch cropping.

Expected layout under a dataset root::

    ir/<id>.png  vis/<id>.png  [masks_ir/<id>.png  masks_vis/<id>.png]
"""

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from torch.utils.data import Dataset

from sgdfuse.errors import DatasetReadError, DimensionError, EmptyDatasetError
from sgdfuse.models.dataset import DatasetEntry, DatasetIndex, Split
from sgdfuse.models.image import FloatArray, Image, ImagePair, MaskPair, to_tensor

logger = logging.getLogger(__name__)

IR_DIR = "ir"
VIS_DIR = "vis"
MASK_IR_DIR = "masks_ir"
MASK_VIS_DIR = "masks_vis"
IMAGE_SUFFIX = ".png"


def _png_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {
        p.stem: p
        for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() == IMAGE_SUFFIX
    }


def image_size(path: Path) -> tuple[int, int]:
    """(H, W) of an image file without decoding pixels."""
    try:
        with PILImage.open(path) as img:
            width, height = img.size
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetReadError(path, f"Cannot read image file {path}: {e}") from e
    return height, width


def scan_dataset(
    root: Path,
    require_masks: bool = False,
    split: Split = Split.TRAIN,
) -> DatasetIndex:
    """Index every complete IR/VIS pair under ``root``.

    Args:
        root: Dataset root with ``ir/`` and ``vis/`` subdirectories.
        require_masks: Drop (and record) entries lacking either mask file.
        split: Split tag stored in the index.

    Returns:
        DatasetIndex with entries sorted by id.

    Raises:
        EmptyDatasetError: If no complete pair is found.
        DatasetReadError: If a matched file cannot be decoded.
        DimensionError: If a pair's IR and VIS sizes differ.
    """
    root = Path(root)
    ir_files = _png_files(root / IR_DIR)
    vis_files = _png_files(root / VIS_DIR)
    m_ir_files = _png_files(root / MASK_IR_DIR)
    m_vis_files = _png_files(root / MASK_VIS_DIR)

    entries: list[DatasetEntry] = []
    excluded: list[str] = []
    for entry_id in sorted(ir_files.keys() & vis_files.keys()):
        m_ir = m_ir_files.get(entry_id)
        m_vis = m_vis_files.get(entry_id)
        if require_masks and (m_ir is None or m_vis is None):
            excluded.append(entry_id)
            continue
        ir_size = image_size(ir_files[entry_id])
        vis_size = image_size(vis_files[entry_id])
        if ir_size != vis_size:
            raise DimensionError(f"Pair '{entry_id}': IR {ir_size} and VIS {vis_size} differ")
        entries.append(
            DatasetEntry(
                id=entry_id,
                ir_path=ir_files[entry_id],
                vis_path=vis_files[entry_id],
                m_ir_path=m_ir,
                m_vis_path=m_vis,
                height=ir_size[0],
                width=ir_size[1],
            )
        )

    if excluded:
        logger.warning(f"Excluded {len(excluded)} pairs without masks under {root}")
    if not entries:
        raise EmptyDatasetError(f"No complete IR/VIS pairs found under {root}")
    logger.info(f"Indexed {len(entries)} pairs under {root}")
    return DatasetIndex(root=root, split=split, entries=entries, excluded=excluded)


def load_png(path: Path, channels: int) -> FloatArray:
    """Read an 8-bit PNG as an HxWxC float64 array in [0, 1]."""
    mode = "L" if channels == 1 else "RGB"
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert(mode), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetReadError(path, f"Cannot read image file {path}: {e}") from e
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr / 255.0


def to_bytes(arr: FloatArray) -> np.ndarray:
    """Quantize a [0, 1] array to uint8."""
    return np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: Path, arr: FloatArray) -> Path:
    """Write an HxW, HxWx1 or HxWx3 [0, 1] array as an 8-bit PNG."""
    data = to_bytes(arr)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(data).save(path, format="PNG")
    return path


def load_pair(entry: DatasetEntry) -> ImagePair:
    """Decode one indexed pair."""
    return ImagePair(
        ir=Image(load_png(entry.ir_path, 1)),
        vis=Image(load_png(entry.vis_path, 3)),
        id=entry.id,
    )


def load_pairs(index: DatasetIndex, jobs: int = 4) -> list[ImagePair]:
    """Decode every pair of an index, in index order."""
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(load_pair, index.entries))


def crop_window(size_hw: tuple[int, int], size: int, rng_seed: int) -> tuple[int, int]:
    """Uniform (top, left) origin of a ``size`` square inside ``size_hw``."""
    height, width = size_hw
    if size > min(height, width):
        raise DimensionError(f"Patch size {size} exceeds image size {height}x{width}")
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_patch(
    pair: ImagePair,
    masks: MaskPair | None,
    size: int,
    rng_seed: int,
    multiple: int = 1,
) -> tuple[ImagePair, MaskPair | None]:
    """Crop the same random window out of IR, VIS and both masks.

    Args:
        pair: Source pair.
        masks: Masks aligned with ``pair``, or None for Stage-I data.
        size: Square patch side.
        rng_seed: Seed of the window draw.
        multiple: Required divisor of ``size`` (the denoiser stride).

    Raises:
        DimensionError: If the patch does not fit or is not a multiple of ``multiple``.
    """
    if size % multiple != 0:
        raise DimensionError(f"Patch size {size} must be divisible by {multiple}")
    if masks is not None:
        masks.check_matches(pair)
    top, left = crop_window(pair.size, size, rng_seed)
    cropped = ImagePair(
        ir=pair.ir.crop(top, left, size, size),
        vis=pair.vis.crop(top, left, size, size),
        id=pair.id,
    )
    if masks is None:
        return cropped, None
    return cropped, MaskPair(
        m_ir=masks.m_ir.crop(top, left, size, size),
        m_vis=masks.m_vis.crop(top, left, size, size),
        provenance=masks.provenance,
    )


def patch_seed(entry_id: str, seed: int, epoch: int) -> int:
    """Deterministic crop seed for one (id, seed, epoch)."""
    return zlib.crc32(f"{entry_id}:{seed}:{epoch}".encode())


class FusionPatchDataset(Dataset[dict[str, torch.Tensor]]):
    """Random aligned patches over in-memory pairs.

    The crop of each item depends only on (id, seed, epoch), so worker order
    never changes the data.
    """

    def __init__(
        self,
        pairs: list[ImagePair],
        patch_size: int,
        seed: int,
        masks: dict[str, MaskPair] | None = None,
        multiple: int = 1,
    ) -> None:
        self.pairs = pairs
        self.patch_size = patch_size
        self.seed = seed
        self.masks = masks
        self.multiple = multiple
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, idx: int) -> dict[str, torch.Tensor]:
        pair = self.pairs[idx]
        masks = self.masks[pair.id] if self.masks is not None else None
        crop, crop_masks = random_patch(
            pair,
            masks,
            self.patch_size,
            patch_seed(pair.id, self.seed, self.epoch),
            self.multiple,
        )
        item = {
            "ir": to_tensor(crop.ir.data)[0],
            "vis": to_tensor(crop.vis.data)[0],
        }
        if crop_masks is not None:
            item["m_ir"] = to_tensor(crop_masks.m_ir.data)[0]
            item["m_vis"] = to_tensor(crop_masks.m_vis.data)[0]
        return item

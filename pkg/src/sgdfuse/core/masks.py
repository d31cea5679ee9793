"""Mask providers: files, a synthetic saliency oracle, random patches and a remote service.

Every provider returns a MaskPair aligned with its ImagePair or raises; nothing
here resizes a mask.
"""

import asyncio
import io
import logging
from pathlib import Path
from typing import Any

import httpx
import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from sgdfuse.config import MaskConfig, MaskKind, RunConfig
from sgdfuse.core.ingest import MASK_IR_DIR, MASK_VIS_DIR, load_png, save_png, to_bytes
from sgdfuse.errors import DatasetReadError, DimensionError, RemoteMaskError
from sgdfuse.models.dataset import DatasetEntry
from sgdfuse.models.image import FloatArray, Image, ImagePair, MaskPair, MaskProvenance, luma

logger = logging.getLogger(__name__)

REMOTE_ATTEMPTS = 2


class MaskSource(BaseModel):
    """A validated mask source description."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: MaskKind
    params: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _required_params(self) -> "MaskSource":
        p = self.params
        if self.kind is MaskKind.SYNTHETIC:
            for key in ("q_ir", "q_vis"):
                q = p.get(key)
                if not isinstance(q, (int, float)) or not 0.0 < q < 1.0:
                    raise ValueError(f"synthetic masks need {key} in (0, 1), got {q!r}")
        elif self.kind is MaskKind.RANDOM_PATCH:
            fraction = p.get("fraction")
            if not isinstance(fraction, (int, float)) or not 0.0 < fraction <= 1.0:
                raise ValueError(f"random_patch masks need fraction in (0, 1], got {fraction!r}")
            if not isinstance(p.get("seed"), int):
                raise ValueError("random_patch masks need an integer seed")
        elif self.kind is MaskKind.REMOTE:
            endpoint = p.get("endpoint")
            if not isinstance(endpoint, str) or not endpoint.startswith(("http://", "https://")):
                raise ValueError(f"remote masks need an http(s) endpoint, got {endpoint!r}")
            if float(p.get("timeout_s", 0)) <= 0:
                raise ValueError("remote masks need a positive timeout_s")
        return self

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "MaskSource":
        """Build the source selected by a run config, with ablations applied."""
        m: MaskConfig = cfg.masks
        kind = cfg.mask_source
        params: dict[str, Any]
        if kind is MaskKind.SYNTHETIC:
            params = {"q_ir": m.q_ir, "q_vis": m.q_vis}
        elif kind is MaskKind.RANDOM_PATCH:
            params = {"fraction": m.fraction, "seed": m.seed}
        elif kind is MaskKind.REMOTE:
            params = {
                "endpoint": cfg.effective_mask_endpoint,
                "timeout_s": m.timeout_s,
                "max_in_flight": m.max_in_flight,
            }
        else:
            params = {}
        return cls(kind=kind, params=params)


def masks_from_files(entry: DatasetEntry) -> MaskPair:
    """Load the mask PNGs of an index entry.

    Raises:
        DatasetReadError: If either mask path is missing or unreadable.
        DimensionError: If a mask does not match the pair's size.
    """
    if entry.m_ir_path is None or entry.m_vis_path is None:
        missing = entry.m_ir_path or entry.m_vis_path or entry.ir_path
        raise DatasetReadError(missing, f"Pair '{entry.id}' has no mask files")
    m_ir = load_png(entry.m_ir_path, 1)
    m_vis = load_png(entry.m_vis_path, 1)
    for path, arr in ((entry.m_ir_path, m_ir), (entry.m_vis_path, m_vis)):
        if arr.shape[:2] != (entry.height, entry.width):
            raise DimensionError(
                f"Mask {path} is {arr.shape[0]}x{arr.shape[1]}, "
                f"pair '{entry.id}' is {entry.height}x{entry.width}"
            )
    return MaskPair(Image(m_ir), Image(m_vis), MaskProvenance.FILE)


def sobel_magnitude(gray: FloatArray) -> FloatArray:
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.asarray(np.hypot(gx, gy), dtype=np.float64)


def _quantile_mask(values: FloatArray, q: float, what: str, pair_id: str) -> FloatArray:
    if np.ptp(values) == 0.0:
        logger.warning(f"Constant {what} for pair '{pair_id}'; mask set to zeros")
        return np.zeros_like(values)
    threshold = np.quantile(values, q)
    return (values >= threshold).astype(np.float64)


def synth_masks(pair: ImagePair, q_ir: float, q_vis: float) -> MaskPair:
    """Quantile masks: bright IR pixels and strong VIS luminance edges."""
    if not (0.0 < q_ir < 1.0 and 0.0 < q_vis < 1.0):
        raise ValueError(f"Quantiles must lie in (0, 1), got q_ir={q_ir}, q_vis={q_vis}")
    m_ir = _quantile_mask(pair.ir.data[:, :, 0], q_ir, "IR intensity", pair.id)
    grad = sobel_magnitude(luma(pair.vis.data))
    m_vis = _quantile_mask(grad, q_vis, "VIS gradient", pair.id)
    return MaskPair(Image(m_ir), Image(m_vis), MaskProvenance.SYNTHETIC)


def _random_rectangle(height: int, width: int, fraction: float, rng: np.random.Generator) -> FloatArray:
    mask = np.zeros((height, width), dtype=np.float64)
    if fraction >= 1.0:
        mask[:] = 1.0
        return mask
    area = fraction * height * width
    aspect = rng.uniform(0.75, 4.0 / 3.0)
    rect_h = int(np.clip(round(np.sqrt(area * aspect)), 1, height))
    rect_w = int(np.clip(round(area / rect_h), 1, width))
    # a side clipped to the image moves the lost area into the other side
    rect_h = int(np.clip(round(area / rect_w), 1, height))
    top = int(rng.integers(0, height - rect_h + 1))
    left = int(rng.integers(0, width - rect_w + 1))
    mask[top : top + rect_h, left : left + rect_w] = 1.0
    return mask


def random_patch_masks(pair: ImagePair, fraction: float, seed: int) -> MaskPair:
    """Replace semantic masks with one random rectangle per modality."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    height, width = pair.size
    rng = np.random.default_rng(seed)
    m_ir = _random_rectangle(height, width, fraction, rng)
    m_vis = _random_rectangle(height, width, fraction, rng)
    return MaskPair(Image(m_ir), Image(m_vis), MaskProvenance.RANDOM_PATCH)


def drop_masks(masks: MaskPair, no_ir: bool, no_vis: bool) -> MaskPair:
    """Zero the masks removed by the single-modality ablations."""
    if not (no_ir or no_vis):
        return masks
    m_ir = Image(np.zeros_like(masks.m_ir.data)) if no_ir else masks.m_ir
    m_vis = Image(np.zeros_like(masks.m_vis.data)) if no_vis else masks.m_vis
    return MaskPair(m_ir, m_vis, masks.provenance)


def encode_png(arr: FloatArray) -> bytes:
    data = to_bytes(arr)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    buf = io.BytesIO()
    PILImage.fromarray(data).save(buf, format="PNG")
    return buf.getvalue()


class RemoteMaskClient:
    """Async client for a segmentation service exposing ``POST /segment``.

    The request body is PNG bytes; the response must be a grayscale PNG of the
    same size. In-flight requests are bounded by a semaphore.
    """

    def __init__(
        self,
        endpoint: str,
        timeout_s: float = 30.0,
        max_in_flight: int = 4,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        """Initialize the client.

        Args:
            endpoint: Service base URL.
            timeout_s: Per-request timeout.
            max_in_flight: Concurrent request limit.
            transport: Optional transport (tests inject ``httpx.MockTransport``).
        """
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self._semaphore = asyncio.Semaphore(max_in_flight)
        self.client = httpx.AsyncClient(timeout=timeout_s, transport=transport)

    async def segment(self, image: Image) -> Image:
        """Request a mask for one image, retrying once on transient failure."""
        url = f"{self.endpoint}/segment"
        body = encode_png(image.data)
        reason = "unknown"
        for attempt in range(1, REMOTE_ATTEMPTS + 1):
            try:
                async with self._semaphore:
                    response = await self.client.post(
                        url, content=body, headers={"Content-Type": "image/png"}
                    )
                response.raise_for_status()
            except httpx.TimeoutException as e:
                reason = "timeout"
                logger.warning(f"Mask service timeout (attempt {attempt}/{REMOTE_ATTEMPTS}): {e}")
                continue
            except httpx.HTTPStatusError as e:
                reason = f"http {e.response.status_code}"
                logger.warning(f"Mask service HTTP error (attempt {attempt}/{REMOTE_ATTEMPTS}): {e}")
                continue
            except httpx.TransportError as e:
                reason = "transport"
                logger.warning(f"Mask service unreachable (attempt {attempt}/{REMOTE_ATTEMPTS}): {e}")
                continue
            return self._decode(response.content, image.size, attempt)
        raise RemoteMaskError(reason, REMOTE_ATTEMPTS)

    def _decode(self, content: bytes, size: tuple[int, int], attempt: int) -> Image:
        try:
            with PILImage.open(io.BytesIO(content)) as img:
                arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as e:
            raise RemoteMaskError("decode", attempt) from e
        if arr.shape != size:
            raise RemoteMaskError(
                "dimension",
                attempt,
                f"Mask service returned {arr.shape[0]}x{arr.shape[1]}, expected {size[0]}x{size[1]}",
            ) from DimensionError(f"expected {size}, got {arr.shape}")
        return Image(arr)

    async def close(self) -> None:
        await self.client.aclose()

    async def __aenter__(self) -> "RemoteMaskClient":
        return self

    async def __aexit__(self, *exc: object) -> None:
        await self.close()


async def fetch_masks_remote(
    pair: ImagePair,
    endpoint: str,
    timeout_s: float,
    client: RemoteMaskClient | None = None,
) -> MaskPair:
    """Fetch both masks of a pair from the remote service.

    Both requests are awaited to completion before the client is released, so
    a failure of one never leaves the other running.

    Raises:
        RemoteMaskError: On timeout, HTTP error or a mask of the wrong size.
    """
    owned = client is None
    active = client or RemoteMaskClient(endpoint, timeout_s)
    try:
        m_ir, m_vis = await asyncio.gather(
            active.segment(pair.ir), active.segment(pair.vis), return_exceptions=True
        )
    finally:
        if owned:
            await active.close()
    if isinstance(m_ir, BaseException):
        raise m_ir
    if isinstance(m_vis, BaseException):
        raise m_vis
    return MaskPair(m_ir, m_vis, MaskProvenance.REMOTE)


class MaskProvider:
    """Dispatches mask requests to the configured source."""

    def __init__(
        self,
        source: MaskSource,
        fallback_to_synthetic: bool = True,
        q_ir: float = 0.9,
        q_vis: float = 0.9,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        self.source = source
        self.fallback_to_synthetic = fallback_to_synthetic
        self.q_ir = q_ir
        self.q_vis = q_vis
        self._transport = transport

    @classmethod
    def from_config(
        cls, cfg: RunConfig, transport: httpx.AsyncBaseTransport | None = None
    ) -> "MaskProvider":
        return cls(
            MaskSource.from_config(cfg),
            fallback_to_synthetic=cfg.masks.fallback_to_synthetic,
            q_ir=cfg.masks.q_ir,
            q_vis=cfg.masks.q_vis,
            transport=transport,
        )

    def masks_for(self, pair: ImagePair, entry: DatasetEntry | None = None) -> MaskPair:
        """Masks for one pair."""
        return self.masks_for_all([pair], [entry] if entry is not None else None)[pair.id]

    def masks_for_all(
        self,
        pairs: list[ImagePair],
        entries: list[DatasetEntry] | None = None,
    ) -> dict[str, MaskPair]:
        """Masks for every pair, keyed by pair id."""
        kind = self.source.kind
        params = self.source.params
        result: dict[str, MaskPair]
        if kind is MaskKind.FILE:
            if entries is None:
                raise ValueError("file masks need dataset entries")
            result = {entry.id: masks_from_files(entry) for entry in entries}
        elif kind is MaskKind.SYNTHETIC:
            result = {p.id: synth_masks(p, params["q_ir"], params["q_vis"]) for p in pairs}
        elif kind is MaskKind.RANDOM_PATCH:
            result = {
                p.id: random_patch_masks(p, params["fraction"], params["seed"] + i)
                for i, p in enumerate(pairs)
            }
        else:
            result = asyncio.run(self._remote_all(pairs))
        for pair in pairs:
            result[pair.id].check_matches(pair)
        counts: dict[str, int] = {}
        for masks in result.values():
            counts[masks.provenance.value] = counts.get(masks.provenance.value, 0) + 1
        logger.info(f"Built masks for {len(result)} pairs, provenance counts {counts}")
        return result

    async def _remote_all(self, pairs: list[ImagePair]) -> dict[str, MaskPair]:
        params = self.source.params
        async with RemoteMaskClient(
            params["endpoint"],
            params["timeout_s"],
            params.get("max_in_flight", 4),
            transport=self._transport,
        ) as client:
            fetched = await asyncio.gather(
                *(fetch_masks_remote(p, params["endpoint"], params["timeout_s"], client) for p in pairs),
                return_exceptions=True,
            )
        result: dict[str, MaskPair] = {}
        for pair, outcome in zip(pairs, fetched, strict=True):
            if isinstance(outcome, MaskPair):
                result[pair.id] = outcome
            elif isinstance(outcome, RemoteMaskError) and self.fallback_to_synthetic:
                logger.warning(f"Remote masks failed for '{pair.id}' ({outcome}); using synthetic masks")
                result[pair.id] = synth_masks(pair, self.q_ir, self.q_vis)
            else:
                raise outcome
        return result


def write_masks(masks: MaskPair, root: Path, entry_id: str) -> tuple[Path, Path]:
    """Store a mask pair in the dataset layout."""
    return (
        save_png(root / MASK_IR_DIR / f"{entry_id}.png", masks.m_ir.data),
        save_png(root / MASK_VIS_DIR / f"{entry_id}.png", masks.m_vis.data),
    )

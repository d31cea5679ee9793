"""Fusion-quality metrics and the batch evaluator.

Metric functions take grayscale float arrays on the 8-bit scale [0, 255]:
the fused image F and the sources A (infrared) and B (visible luma).
Histogram metrics round to integer levels first.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from sgdfuse.config import QabfConstants, VIFConstants
from sgdfuse.core.ingest import load_png
from sgdfuse.errors import DimensionError
from sgdfuse.models.dataset import DatasetEntry, DatasetIndex
from sgdfuse.models.image import FloatArray, luma
from sgdfuse.models.report import METRIC_NAMES, ImageMetrics, MetricReport

logger = logging.getLogger(__name__)

LEVELS = 256
SUMMARY_ID = "mean"

_SOBEL_H = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_V = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def _check_same(*images: FloatArray) -> None:
    if len({img.shape for img in images}) != 1:
        raise DimensionError(f"Metric inputs differ in size: {[img.shape for img in images]}")


def to_gray_u8(arr: FloatArray) -> FloatArray:
    """[0, 1] HxW, HxWx1 or HxWx3 array -> HxW integer levels as float64."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3:
        a = luma(a) if a.shape[2] == 3 else a[:, :, 0]
    return np.clip(np.rint(a * 255.0), 0, 255)


def _levels(img: FloatArray) -> np.ndarray:
    """Round to integer intensity levels clipped to [0, LEVELS - 1]."""
    return np.clip(np.rint(img), 0, LEVELS - 1).astype(np.intp)


def _entropy_of(counts: np.ndarray) -> float:
    """Entropy in bits of a histogram; empty bins contribute nothing."""
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def en(f: FloatArray) -> float:
    """Shannon entropy (bits) of the 256-bin histogram."""
    return _entropy_of(np.bincount(_levels(f).ravel(), minlength=LEVELS))


def sd(f: FloatArray) -> float:
    """Population standard deviation of intensities."""
    return float(np.std(np.asarray(f, dtype=np.float64)))


def sf(f: FloatArray) -> float:
    """Spatial frequency sqrt(RF^2 + CF^2)."""
    a = np.asarray(f, dtype=np.float64)
    rf = np.sqrt(np.mean(np.diff(a, axis=1) ** 2))
    cf = np.sqrt(np.mean(np.diff(a, axis=0) ** 2))
    return float(np.sqrt(rf**2 + cf**2))


def _mutual_information(x: FloatArray, y: FloatArray) -> float:
    """Mutual information of two images from their joint 256x256 histogram.

    Args:
        x: Image on the 8-bit scale; rounded to integer levels.
        y: Image of the same shape as ``x``.

    Returns:
        MI(x, y) in bits. Cells with zero joint probability are skipped.
    """
    joint = np.bincount(
        (_levels(x) * LEVELS + _levels(y)).ravel(), minlength=LEVELS * LEVELS
    ).reshape(LEVELS, LEVELS).astype(np.float64)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log2(pxy[nz] / (px @ py)[nz])))


def mi(f: FloatArray, a: FloatArray, b: FloatArray) -> float:
    """MI(F, A) + MI(F, B) in bits."""
    _check_same(f, a, b)
    return _mutual_information(f, a) + _mutual_information(f, b)


def _pearson(x: FloatArray, y: FloatArray, what: str) -> float:
    """Pearson correlation of two equally shaped arrays.

    Args:
        x: First array.
        y: Second array.
        what: Name of the SCD term, used in the zero-variance warning.

    Returns:
        The correlation coefficient, or 0.0 when either argument is constant.
    """
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.sum(xc * xc)) * float(np.sum(yc * yc)))
    if denom == 0.0:
        logger.warning(f"Zero-variance argument in SCD term {what}; contribution set to 0")
        return 0.0
    return float(np.sum(xc * yc)) / denom


def scd(f: FloatArray, a: FloatArray, b: FloatArray) -> float:
    """Sum of correlations of differences r(F-B, A) + r(F-A, B)."""
    _check_same(f, a, b)
    f, a, b = (np.asarray(x, dtype=np.float64) for x in (f, a, b))
    return _pearson(f - b, a, "r(F-B, A)") + _pearson(f - a, b, "r(F-A, B)")


def gaussian_window(size: int, sigma: float) -> FloatArray:
    """Normalized 2-D Gaussian like MATLAB fspecial('gaussian')."""
    m = (size - 1.0) / 2.0
    y, x = np.ogrid[-m : m + 1, -m : m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return np.asarray(h / h.sum(), dtype=np.float64)


def _window_size(scale: int, scales: int) -> int:
    return 2 ** (scales - scale + 1) + 1


@lru_cache(maxsize=8)
def vif_min_size(scales: int = 4) -> int:
    """Smallest square side for which every VIF scale has a valid window."""
    side = 1
    while True:
        n = side
        ok = True
        for scale in range(1, scales + 1):
            win = _window_size(scale, scales)
            if scale > 1:
                # valid filtering then [::2]
                n = max(0, (n - win + 2) // 2)
            if n < win:
                ok = False
                break
        if ok:
            return side
        side += 1


def _vif_single(ref: FloatArray, dist: FloatArray, consts: VIFConstants) -> float:
    """Pixel-domain VIF of one distorted image against one reference.

    Every scale after the first low-passes and decimates both images by two
    before the local statistics are taken with a Gaussian window.

    Args:
        ref: Reference image (a source).
        dist: Distorted image (the fused result).
        consts: Noise variance, scale count and variance floor.

    Returns:
        Ratio of the information kept in ``dist`` to the information in
        ``ref``, summed over scales; 1.0 when ``ref`` carries none.
    """
    eps = consts.variance_floor
    num = 0.0
    den = 0.0
    for scale in range(1, consts.scales + 1):
        n = _window_size(scale, consts.scales)
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        sigma1_sq = convolve2d(ref * ref, win, mode="valid") - mu1 * mu1
        sigma2_sq = convolve2d(dist * dist, win, mode="valid") - mu2 * mu2
        sigma12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2
        sigma1_sq[sigma1_sq < 0] = 0
        sigma2_sq[sigma2_sq < 0] = 0

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12
        low1 = sigma1_sq < eps
        g[low1] = 0
        sv_sq[low1] = sigma2_sq[low1]
        sigma1_sq[low1] = 0
        low2 = sigma2_sq < eps
        g[low2] = 0
        sv_sq[low2] = 0
        neg = g < 0
        sv_sq[neg] = sigma2_sq[neg]
        g[neg] = 0
        sv_sq[sv_sq <= eps] = eps

        num += float(np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + consts.sigma_nsq))))
        den += float(np.sum(np.log10(1.0 + sigma1_sq / consts.sigma_nsq)))
    if den == 0.0:
        logger.warning("VIF reference carries no information; term set to 1")
        return 1.0
    return num / den


def vif(
    f: FloatArray, a: FloatArray, b: FloatArray, consts: VIFConstants | None = None
) -> float:
    """Multi-scale pixel-domain VIF of F against A plus against B."""
    _check_same(f, a, b)
    consts = consts or VIFConstants()
    min_side = vif_min_size(consts.scales)
    if min(f.shape) < min_side:
        raise DimensionError(f"VIF needs images of at least {min_side}x{min_side}, got {f.shape}")
    f, a, b = (np.asarray(x, dtype=np.float64) for x in (f, a, b))
    return _vif_single(a, f, consts) + _vif_single(b, f, consts)


def _edges(img: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Sobel edge strength and orientation with zeros outside the image.

    Args:
        img: Grayscale image on the 8-bit scale.

    Returns:
        ``(strength, orientation)``, both shaped like ``img``. Orientation is
        ``atan(s_y / s_x)`` in (-pi/2, pi/2], and pi/2 where ``s_x`` is zero.
    """
    sx = convolve2d(img, _SOBEL_H, mode="same")
    sy = convolve2d(img, _SOBEL_V, mode="same")
    strength = np.sqrt(sx * sx + sy * sy)
    orientation = np.full(img.shape, math.pi / 2)
    nz = sx != 0
    orientation[nz] = np.arctan(sy[nz] / sx[nz])
    return strength, orientation


def _preservation(
    g_src: FloatArray,
    a_src: FloatArray,
    g_f: FloatArray,
    a_f: FloatArray,
    consts: QabfConstants,
) -> FloatArray:
    """Per-pixel edge preservation of one source in the fused image.

    Args:
        g_src: Source edge strength.
        a_src: Source edge orientation.
        g_f: Fused edge strength.
        a_f: Fused edge orientation.
        consts: Sigmoid gains, slopes and midpoints.

    Returns:
        Product of the strength and orientation preservation scores, each
        mapped through its sigmoid. Orientations are compared modulo pi.
    """
    gamma_g, gamma_a = consts.gains
    rel_g = np.zeros_like(g_src)
    src_stronger = g_src > g_f
    f_stronger = g_src < g_f
    equal = g_src == g_f
    rel_g[src_stronger] = g_f[src_stronger] / g_src[src_stronger]
    rel_g[f_stronger] = g_src[f_stronger] / g_f[f_stronger]
    rel_g[equal & (g_src > 0)] = 1.0
    # orientations are directions modulo pi
    diff = np.abs(a_src - a_f)
    diff = np.minimum(diff, math.pi - diff)
    rel_a = 1.0 - diff / (math.pi / 2)
    q_g = gamma_g / (1.0 + np.exp(consts.kappa_g * (rel_g - consts.sigma_g)))
    q_a = gamma_a / (1.0 + np.exp(consts.kappa_a * (rel_a - consts.sigma_a)))
    return np.asarray(q_g * q_a, dtype=np.float64)


def qabf(
    f: FloatArray, a: FloatArray, b: FloatArray, consts: QabfConstants | None = None
) -> float:
    """Edge-transfer quality Q^{AB/F} in [0, 1]."""
    _check_same(f, a, b)
    consts = consts or QabfConstants()
    f, a, b = (np.asarray(x, dtype=np.float64) for x in (f, a, b))
    g_a, a_a = _edges(a)
    g_b, a_b = _edges(b)
    g_f, a_f = _edges(f)
    denom = float(np.sum(g_a + g_b))
    if denom == 0.0:
        logger.warning("Both Qabf sources are edge-free; Qabf set to 0")
        return 0.0
    q_af = _preservation(g_a, a_a, g_f, a_f, consts)
    q_bf = _preservation(g_b, a_b, g_f, a_f, consts)
    value = float(np.sum(q_af * g_a + q_bf * g_b)) / denom
    return min(1.0, max(0.0, value))


def compute_metrics(
    entry_id: str,
    f: FloatArray,
    a: FloatArray,
    b: FloatArray,
    qabf_consts: QabfConstants | None = None,
    vif_consts: VIFConstants | None = None,
) -> ImageMetrics:
    """All seven metrics for one grayscale triple on the 8-bit scale."""
    return ImageMetrics(
        id=entry_id,
        EN=en(f),
        SD=sd(f),
        SF=sf(f),
        MI=mi(f, a, b),
        SCD=scd(f, a, b),
        VIF=vif(f, a, b, vif_consts),
        Qabf=qabf(f, a, b, qabf_consts),
    )


def fused_path(fused_dir: Path, entry_id: str) -> Path:
    return fused_dir / f"{entry_id}.png"


def evaluate_all(
    index: DatasetIndex,
    fused_dir: Path,
    jobs: int = 1,
    qabf_consts: QabfConstants | None = None,
    vif_consts: VIFConstants | None = None,
) -> MetricReport:
    """Evaluate the fused image of every index entry.

    Entries without a fused file are listed in ``MetricReport.missing`` and
    excluded from the aggregate. Per-image rows follow index order.
    """
    present: list[DatasetEntry] = []
    missing: list[str] = []
    for entry in index.entries:
        if fused_path(fused_dir, entry.id).is_file():
            present.append(entry)
        else:
            missing.append(entry.id)
    if missing:
        logger.error(f"{len(missing)} fused images missing in {fused_dir}: {', '.join(missing)}")

    def _one(entry: DatasetEntry) -> ImageMetrics:
        f = to_gray_u8(load_png(fused_path(fused_dir, entry.id), 3))
        a = to_gray_u8(load_png(entry.ir_path, 1))
        b = to_gray_u8(load_png(entry.vis_path, 3))
        return compute_metrics(entry.id, f, a, b, qabf_consts, vif_consts)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        per_image = list(pool.map(_one, present))
    logger.info(f"Evaluated {len(per_image)} fused images from {fused_dir}")
    return MetricReport(per_image=per_image, missing=missing)


def write_report_csv(report: MetricReport, path: Path) -> Path:
    """Write per-image rows plus a summary row of means."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *METRIC_NAMES])
        for row in report.per_image:
            writer.writerow([row.id, *(repr(v) for v in row.values().values())])
        writer.writerow([SUMMARY_ID, *(repr(v) for v in report.aggregate.values())])
    return path


def read_report_csv(path: Path) -> MetricReport:
    """Read a report written by write_report_csv.

    The summary row is always the last row; it is dropped and recomputed. An
    image whose id equals ``SUMMARY_ID`` anywhere else is kept.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", *METRIC_NAMES]:
            raise ValueError(f"Unexpected report header in {path}: {reader.fieldnames}")
        records = list(reader)
    if records and records[-1]["id"] == SUMMARY_ID:
        records.pop()
    rows = [
        ImageMetrics(id=r["id"], **{name: float(r[name]) for name in METRIC_NAMES})
        for r in records
    ]
    return MetricReport(per_image=rows)


def compare_reports(baseline: MetricReport, variant: MetricReport) -> dict[str, float]:
    """Aggregate deltas variant - baseline for every metric."""
    base = baseline.aggregate
    other = variant.aggregate
    return {name: other[name] - base[name] for name in METRIC_NAMES}

"""Tests for the fusion metrics and the evaluator."""

import logging
import math
import shutil
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from sgdfuse.config import QabfConstants
from sgdfuse.core.ingest import scan_dataset
from sgdfuse.core.metrics import (
    SUMMARY_ID,
    compare_reports,
    compute_metrics,
    en,
    evaluate_all,
    gaussian_window,
    mi,
    qabf,
    read_report_csv,
    scd,
    sd,
    sf,
    to_gray_u8,
    vif,
    vif_min_size,
    write_report_csv,
)
from sgdfuse.errors import DimensionError
from sgdfuse.models.report import METRIC_NAMES, ImageMetrics, MetricReport


def _levels(rng: np.random.Generator, size: int = 48, top: int = 256) -> np.ndarray:
    return rng.integers(0, top, (size, size)).astype(np.float64)


def _smooth(rng: np.random.Generator, size: int = 48) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.random((size, size)), 2.0)
    field = (field - field.min()) / (field.max() - field.min())
    return np.rint(field * 255.0)


def _mi_oracle(x: np.ndarray, y: np.ndarray) -> float:
    """Mutual information from explicit pair counts."""
    n = x.size
    joint = Counter(zip(x.ravel().tolist(), y.ravel().tolist(), strict=True))
    px = Counter(x.ravel().tolist())
    py = Counter(y.ravel().tolist())
    return sum(
        c / n * math.log2((c / n) / ((px[i] / n) * (py[j] / n))) for (i, j), c in joint.items()
    )


def _grid(img: np.ndarray) -> list[list[float]]:
    return [[float(v) for v in row] for row in img]


def _en_oracle(img: np.ndarray) -> float:
    counts = Counter(int(v) for row in _grid(img) for v in row)
    n = img.size
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def _sd_oracle(img: np.ndarray) -> float:
    values = [v for row in _grid(img) for v in row]
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def _sf_oracle(img: np.ndarray) -> float:
    g = _grid(img)
    rows, cols = len(g), len(g[0])
    rf_sq = sum((g[i][j] - g[i][j - 1]) ** 2 for i in range(rows) for j in range(1, cols))
    cf_sq = sum((g[i][j] - g[i - 1][j]) ** 2 for i in range(1, rows) for j in range(cols))
    return math.sqrt(rf_sq / (rows * (cols - 1)) + cf_sq / ((rows - 1) * cols))


def _pearson_oracle(x: list[float], y: list[float]) -> float:
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((u - mx) * (v - my) for u, v in zip(x, y, strict=True))
    sxx = sum((u - mx) ** 2 for u in x)
    syy = sum((v - my) ** 2 for v in y)
    return 0.0 if sxx * syy == 0.0 else sxy / math.sqrt(sxx * syy)


def _scd_oracle(f: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    fv, av, bv = ([v for row in _grid(x) for v in row] for x in (f, a, b))
    f_minus_b = [u - v for u, v in zip(fv, bv, strict=True)]
    f_minus_a = [u - v for u, v in zip(fv, av, strict=True)]
    return _pearson_oracle(f_minus_b, av) + _pearson_oracle(f_minus_a, bv)


def _convolve_same(g: list[list[float]], kernel: list[list[float]]) -> list[list[float]]:
    """3x3 convolution (flipped kernel) with zeros outside the image."""
    rows, cols = len(g), len(g[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for p in range(3):
                for q in range(3):
                    y, x = i + 1 - p, j + 1 - q
                    if 0 <= y < rows and 0 <= x < cols:
                        acc += kernel[p][q] * g[y][x]
            out[i][j] = acc
    return out


def _edge_oracle(img: np.ndarray) -> tuple[list[list[float]], list[list[float]]]:
    g = _grid(img)
    sx = _convolve_same(g, [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    sy = _convolve_same(g, [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])
    strength = [
        [math.sqrt(x * x + y * y) for x, y in zip(rx, ry, strict=True)]
        for rx, ry in zip(sx, sy, strict=True)
    ]
    angle = [
        [math.atan(y / x) if x != 0 else math.pi / 2 for x, y in zip(rx, ry, strict=True)]
        for rx, ry in zip(sx, sy, strict=True)
    ]
    return strength, angle


def _qabf_oracle(f: np.ndarray, a: np.ndarray, b: np.ndarray, consts: QabfConstants) -> float:
    gamma_g, gamma_a = consts.gains
    g_f, a_f = _edge_oracle(f)
    num = den = 0.0
    for src in (a, b):
        g_s, a_s = _edge_oracle(src)
        for i in range(f.shape[0]):
            for j in range(f.shape[1]):
                gs, gf = g_s[i][j], g_f[i][j]
                if gs > gf:
                    rel_g = gf / gs
                elif gs < gf:
                    rel_g = gs / gf
                else:
                    rel_g = 1.0 if gs > 0 else 0.0
                diff = abs(a_s[i][j] - a_f[i][j])
                rel_a = 1.0 - min(diff, math.pi - diff) / (math.pi / 2)
                q_g = gamma_g / (1.0 + math.exp(consts.kappa_g * (rel_g - consts.sigma_g)))
                q_a = gamma_a / (1.0 + math.exp(consts.kappa_a * (rel_a - consts.sigma_a)))
                num += q_g * q_a * gs
                den += gs
    return min(1.0, max(0.0, num / den))


class TestSimpleMetrics:
    """Tests for EN, SD and SF."""

    def test_entropy_of_uniform_histogram(self) -> None:
        """Test that one pixel per level gives 8 bits."""
        f = np.arange(256, dtype=np.float64).reshape(16, 16)
        assert en(f) == pytest.approx(8.0)
        assert en(np.zeros((8, 8))) == 0.0

    def test_standard_deviation(self) -> None:
        """Test the population SD of a half-black, half-white image."""
        f = np.zeros((8, 8))
        f[:, 4:] = 255.0
        assert sd(f) == pytest.approx(127.5)

    def test_spatial_frequency_of_checkerboard(self) -> None:
        """Test that a 0/255 checkerboard has SF = 255 * sqrt(2)."""
        f = (np.indices((8, 8)).sum(axis=0) % 2) * 255.0
        assert sf(f) == pytest.approx(255.0 * math.sqrt(2.0))
        assert sf(np.full((8, 8), 9.0)) == 0.0

    def test_to_gray_u8(self) -> None:
        """Test conversion to integer levels."""
        assert to_gray_u8(np.ones((8, 8, 3))).max() == 255.0
        np.testing.assert_array_equal(to_gray_u8(np.full((8, 8, 1), 0.5)), 128.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_against_loop_oracles(self, seed: int) -> None:
        """Test EN, SD and SF against element-by-element loops on random images."""
        f = np.random.default_rng(seed).integers(0, 256, (9, 13)).astype(np.float64)
        assert en(f) == pytest.approx(_en_oracle(f), abs=1e-9)
        assert sd(f) == pytest.approx(_sd_oracle(f), abs=1e-9)
        assert sf(f) == pytest.approx(_sf_oracle(f), abs=1e-9)


class TestMutualInformation:
    """Tests for MI."""

    def test_identical_images(self, rng: np.random.Generator) -> None:
        """Test that MI(F=A=B) equals twice the entropy."""
        f = _levels(rng, 32)
        assert mi(f, f, f) == pytest.approx(2 * en(f))

    def test_against_oracle(self, rng: np.random.Generator) -> None:
        """Test the histogram implementation against explicit counting."""
        f, a, b = _levels(rng, 16, 6), _levels(rng, 16, 6), _levels(rng, 16, 6)
        expected = _mi_oracle(f, a) + _mi_oracle(f, b)
        assert mi(f, a, b) == pytest.approx(expected, abs=1e-9)

    def test_size_mismatch(self) -> None:
        """Test that sources must match the fused image."""
        with pytest.raises(DimensionError):
            mi(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 9)))


class TestSCD:
    """Tests for the sum of correlations of differences."""

    def test_additive_fusion(self, rng: np.random.Generator) -> None:
        """Test that F = A + B scores exactly 2."""
        a, b = _levels(rng), _levels(rng)
        assert scd(a + b, a, b) == pytest.approx(2.0)

    def test_zero_variance_term(self, rng: np.random.Generator, caplog: pytest.LogCaptureFixture) -> None:
        """Test that a constant argument contributes 0 and logs a warning."""
        a = _levels(rng)
        b = np.full_like(a, 10.0)
        with caplog.at_level(logging.WARNING):
            value = scd(a + b, a, b)
        assert value == pytest.approx(1.0)
        assert "Zero-variance" in caplog.text

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_against_loop_oracle(self, seed: int) -> None:
        """Test SCD against explicit sums for both correlation terms."""
        gen = np.random.default_rng(seed)
        f, a, b = (gen.integers(0, 256, (10, 7)).astype(np.float64) for _ in range(3))
        assert scd(f, a, b) == pytest.approx(_scd_oracle(f, a, b), abs=1e-9)


class TestVIF:
    """Tests for pixel-domain VIF."""

    def test_minimum_size(self) -> None:
        """Test the smallest valid side for four scales."""
        assert vif_min_size(4) == 41
        img = np.zeros((40, 40))
        with pytest.raises(DimensionError):
            vif(img, img, img)

    def test_identical_images(self, rng: np.random.Generator) -> None:
        """Test that F = A = B gives 1 per source."""
        f = _smooth(rng)
        assert vif(f, f, f) == pytest.approx(2.0, abs=1e-6)

    def test_blur_loses_information(self, rng: np.random.Generator) -> None:
        """Test that a blurred fused image scores below a perfect copy."""
        a = _smooth(rng, 64)
        b = _levels(rng, 64)
        blurred = ndimage.gaussian_filter(a, 2.0)
        assert vif(blurred, a, a) < 2.0
        assert vif(blurred, a, a) < vif(a, a, a)
        assert vif(a, a, b) < 2.0

    def test_gaussian_window_normalized(self) -> None:
        """Test that the window sums to one and is symmetric."""
        w = gaussian_window(9, 1.8)
        assert w.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(w, w.T)


class TestQabf:
    """Tests for edge-transfer quality."""

    def test_perfect_transfer(self, rng: np.random.Generator) -> None:
        """Test that F = A = B scores 1."""
        f = _smooth(rng)
        assert qabf(f, f, f) == pytest.approx(1.0)

    def test_constant_fused_image(self, rng: np.random.Generator) -> None:
        """Test that a flat F transfers almost no edges."""
        a, b = _smooth(rng), _smooth(rng)
        assert qabf(np.zeros_like(a), a, b) < 1e-3

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_against_loop_oracle(self, seed: int) -> None:
        """Test Qabf against a per-pixel loop over zero-padded Sobel responses."""
        gen = np.random.default_rng(seed)
        f, a, b = (gen.integers(0, 256, (8, 11)).astype(np.float64) for _ in range(3))
        expected = _qabf_oracle(f, a, b, QabfConstants())
        assert qabf(f, a, b) == pytest.approx(expected, abs=1e-9)

    def test_oracle_with_partial_transfer(self, rng: np.random.Generator) -> None:
        """Test the loop oracle agreement when F keeps only half of A's contrast."""
        a, b = _smooth(rng, 12), _levels(rng, 12)
        f = np.rint(0.5 * a + 0.1 * b)
        assert qabf(f, a, b) == pytest.approx(_qabf_oracle(f, a, b, QabfConstants()), abs=1e-9)

    def test_range(self, rng: np.random.Generator) -> None:
        """Test that random inputs score inside [0, 1]."""
        value = qabf(_levels(rng), _levels(rng), _levels(rng))
        assert 0.0 <= value <= 1.0

    def test_edge_free_sources(self, caplog: pytest.LogCaptureFixture) -> None:
        """Test that all-black sources give 0 with a warning."""
        flat = np.zeros((16, 16))
        with caplog.at_level(logging.WARNING):
            assert qabf(flat + 1.0, flat, flat) == 0.0
        assert "edge-free" in caplog.text


class TestTransposition:
    """Every metric is unchanged when all three images are transposed."""

    @pytest.mark.parametrize("name", METRIC_NAMES)
    def test_transposition_invariant(self, rng: np.random.Generator, name: str) -> None:
        """Test that the metric ignores the row/column orientation."""
        f, a, b = _levels(rng), _smooth(rng), _smooth(rng)
        f[:, :5] = 0.0
        plain = compute_metrics("x", f, a, b).values()[name]
        flipped = compute_metrics("x", f.T, a.T, b.T).values()[name]
        assert flipped == pytest.approx(plain, rel=1e-9, abs=1e-12)


class TestEvaluator:
    """Tests for evaluate_all and report files."""

    def _report(self, values: list[float]) -> MetricReport:
        return MetricReport(
            per_image=[
                ImageMetrics(id=str(i), **dict.fromkeys(METRIC_NAMES, v))
                for i, v in enumerate(values)
            ]
        )

    def test_compute_metrics_keys(self, rng: np.random.Generator) -> None:
        """Test that compute_metrics fills all seven metrics."""
        f = _smooth(rng)
        row = compute_metrics("x", f, f, f)
        assert row.MI == pytest.approx(2 * row.EN)
        assert set(row.values()) == set(METRIC_NAMES)

    def test_missing_fused_images(self, dataset_root: Path, tmp_path: Path) -> None:
        """Test that missing fused files are listed and excluded from the means."""
        index = scan_dataset(dataset_root)
        fused_dir = tmp_path / "fused"
        fused_dir.mkdir()
        shutil.copy(dataset_root / "vis" / "a.png", fused_dir / "a.png")

        report = evaluate_all(index, fused_dir, jobs=2)
        assert report.missing == ["b"]
        assert report.count == 1
        assert not report.complete
        assert report.aggregate == report.per_image[0].values()
        assert 0.0 <= report.per_image[0].Qabf <= 1.0

    def test_csv_round_trip(self, tmp_path: Path) -> None:
        """Test that the CSV keeps exact values and skips the summary row."""
        report = self._report([0.1, 1.0 / 3.0])
        path = write_report_csv(report, tmp_path / "out" / "report.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "id," + ",".join(METRIC_NAMES)
        assert lines[-1].startswith(f"{SUMMARY_ID},")
        back = read_report_csv(path)
        assert back.per_image == report.per_image

    def test_image_named_like_summary_row(self, tmp_path: Path) -> None:
        """Test that an image whose id is the summary id survives a round trip."""
        report = MetricReport(
            per_image=[
                ImageMetrics(id=SUMMARY_ID, **dict.fromkeys(METRIC_NAMES, 2.0)),
                ImageMetrics(id="other", **dict.fromkeys(METRIC_NAMES, 4.0)),
            ]
        )
        path = write_report_csv(report, tmp_path / "report.csv")
        back = read_report_csv(path)
        assert [row.id for row in back.per_image] == [SUMMARY_ID, "other"]
        assert back.aggregate == dict.fromkeys(METRIC_NAMES, 3.0)

    def test_file_without_summary_row(self, tmp_path: Path) -> None:
        """Test that a report with no trailing summary keeps every row."""
        path = tmp_path / "report.csv"
        values = ",".join(["1.0"] * len(METRIC_NAMES))
        path.write_text(
            "id," + ",".join(METRIC_NAMES) + f"\nx,{values}\ny,{values}\n", encoding="utf-8"
        )
        assert [row.id for row in read_report_csv(path).per_image] == ["x", "y"]

    def test_bad_header(self, tmp_path: Path) -> None:
        """Test that a foreign CSV is rejected."""
        path = tmp_path / "other.csv"
        path.write_text("name,score\nx,1\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_report_csv(path)

    def test_compare_reports(self) -> None:
        """Test that deltas are variant minus baseline."""
        deltas = compare_reports(self._report([1.0, 3.0]), self._report([4.0]))
        assert deltas == dict.fromkeys(METRIC_NAMES, 2.0)

    def test_empty_report_aggregate(self) -> None:
        """Test the aggregate of an empty report."""
        assert MetricReport().aggregate == dict.fromkeys(METRIC_NAMES, 0.0)

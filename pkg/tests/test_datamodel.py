"""Tests for the image value types."""

from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from sgdfuse.errors import ConfigError, DimensionError
from sgdfuse.models.dataset import DatasetEntry, DatasetIndex
from sgdfuse.models.image import (
    ConditionedSample,
    FusedImage,
    FusedStage,
    Image,
    ImagePair,
    MaskPair,
    MaskProvenance,
    ValueRange,
    from_tensor,
    luma,
    normalize,
    split_conditioned_sample,
    to_conditioned_sample,
    to_tensor,
)


class TestImage:
    """Tests for Image construction."""

    def test_grayscale_gets_channel_axis(self) -> None:
        """Test that an HxW array becomes HxWx1."""
        img = Image(np.zeros((8, 10)))
        assert img.data.shape == (8, 10, 1)
        assert img.size == (8, 10)
        assert img.channels == 1

    def test_data_is_read_only(self) -> None:
        """Test that the pixel array cannot be mutated."""
        img = Image(np.zeros((8, 8)))
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1.0

    def test_rejects_too_small(self) -> None:
        """Test the minimum side length."""
        with pytest.raises(DimensionError):
            Image(np.zeros((7, 8)))

    def test_rejects_two_channels(self) -> None:
        """Test that only 1 or 3 channels are allowed."""
        with pytest.raises(DimensionError):
            Image(np.zeros((8, 8, 2)))

    def test_rejects_nan(self) -> None:
        """Test that non-finite values are rejected."""
        arr = np.zeros((8, 8))
        arr[3, 3] = np.nan
        with pytest.raises(ValueError):
            Image(arr)

    def test_rejects_out_of_range(self) -> None:
        """Test that unit images must stay inside [0, 1]."""
        with pytest.raises(ValueError):
            Image(np.full((8, 8), 1.5))
        Image(np.full((8, 8), -1.0), ValueRange.SIGNED)

    def test_crop(self) -> None:
        """Test that crop returns the requested window."""
        arr = np.arange(100, dtype=np.float64).reshape(10, 10) / 100
        img = Image(arr).crop(1, 2, 8, 8)
        np.testing.assert_array_equal(img.data[:, :, 0], arr[1:9, 2:10])


class TestPairs:
    """Tests for ImagePair and MaskPair contracts."""

    def test_pair_channel_contract(self, rng: np.random.Generator) -> None:
        """Test that IR must be 1 channel and VIS 3 channels."""
        with pytest.raises(DimensionError):
            ImagePair(Image(rng.random((8, 8, 3))), Image(rng.random((8, 8, 3))), "x")

    def test_pair_size_mismatch(self, rng: np.random.Generator) -> None:
        """Test that IR and VIS must share a size."""
        with pytest.raises(DimensionError):
            ImagePair(Image(rng.random((8, 8))), Image(rng.random((8, 9, 3))), "x")

    def test_pair_needs_id(self, rng: np.random.Generator) -> None:
        """Test that an empty id is rejected."""
        with pytest.raises(ValueError):
            ImagePair(Image(rng.random((8, 8))), Image(rng.random((8, 8, 3))), "")

    def test_masks_must_match_pair(self, sample_pair: ImagePair) -> None:
        """Test that check_matches rejects masks of another size."""
        masks = MaskPair(Image(np.zeros((8, 8))), Image(np.zeros((8, 8))), MaskProvenance.FILE)
        with pytest.raises(DimensionError):
            masks.check_matches(sample_pair)

    def test_mask_provenance_is_coerced(self) -> None:
        """Test that a provenance string becomes the enum."""
        masks = MaskPair(Image(np.zeros((8, 8))), Image(np.zeros((8, 8))), "synthetic")  # type: ignore[arg-type]
        assert masks.provenance is MaskProvenance.SYNTHETIC


class TestNormalize:
    """Tests for value-range remapping."""

    def test_unit_to_signed(self) -> None:
        """Test the 0 -> -1, 0.5 -> 0, 1 -> 1 mapping."""
        arr = np.tile(np.array([0.0, 0.5, 1.0, 0.25]), (8, 2))
        out = normalize(Image(arr), ValueRange.SIGNED)
        assert out.value_range is ValueRange.SIGNED
        np.testing.assert_allclose(out.data[0, :4, 0], [-1.0, 0.0, 1.0, -0.5])

    def test_round_trip(self, rng: np.random.Generator) -> None:
        """Test that signed and back restores the image."""
        img = Image(rng.random((8, 8, 3)))
        back = normalize(normalize(img, "signed"), "unit")
        np.testing.assert_allclose(back.data, img.data, atol=1e-12)

    def test_same_range_is_identity(self) -> None:
        """Test that normalizing to the current range returns the input."""
        img = Image(np.zeros((8, 8)))
        assert normalize(img, ValueRange.UNIT) is img

    def test_unknown_range(self) -> None:
        """Test that an unknown tag raises ConfigError."""
        with pytest.raises(ConfigError):
            normalize(Image(np.zeros((8, 8))), "percent")


class TestConditionedSample:
    """Tests for packing F1 with the masks."""

    def test_layout(self, sample_masks: MaskPair) -> None:
        """Test channel order and the F1 remap."""
        f1 = FusedImage(np.full((16, 16, 3), 0.5), FusedStage.PRELIMINARY)
        sample = to_conditioned_sample(f1, sample_masks)
        assert sample.data.shape == (16, 16, 5)
        np.testing.assert_allclose(sample.data[:, :, :3], 0.0)
        np.testing.assert_array_equal(sample.data[:, :, 3], sample_masks.m_ir.data[:, :, 0])
        np.testing.assert_array_equal(sample.data[:, :, 4], sample_masks.m_vis.data[:, :, 0])

    def test_split_inverts_packing(self, rng: np.random.Generator, sample_masks: MaskPair) -> None:
        """Test that splitting recovers F1 and the masks."""
        f1 = FusedImage(rng.random((16, 16, 3)), FusedStage.PRELIMINARY)
        back_f1, back_masks = split_conditioned_sample(to_conditioned_sample(f1, sample_masks))
        np.testing.assert_allclose(back_f1.data, f1.data, atol=1e-12)
        np.testing.assert_allclose(back_masks.m_vis.data, sample_masks.m_vis.data)

    def test_final_image_rejected(self, sample_masks: MaskPair) -> None:
        """Test that only preliminary images can be conditioned."""
        f = FusedImage(np.zeros((16, 16, 3)), FusedStage.FINAL)
        with pytest.raises(ValueError):
            to_conditioned_sample(f, sample_masks)

    def test_size_mismatch(self) -> None:
        """Test that F1 and masks must share a size."""
        f1 = FusedImage(np.zeros((8, 8, 3)), FusedStage.PRELIMINARY)
        masks = MaskPair(Image(np.zeros((9, 9))), Image(np.zeros((9, 9))), MaskProvenance.FILE)
        with pytest.raises(DimensionError):
            to_conditioned_sample(f1, masks)

    def test_rejects_mask_out_of_range(self) -> None:
        """Test that mask channels must be in [0, 1]."""
        arr = np.zeros((8, 8, 5))
        arr[:, :, 4] = -0.5
        with pytest.raises(ValueError):
            ConditionedSample(arr)


class TestTensors:
    """Tests for array/tensor conversion."""

    def test_layout_round_trip(self, rng: np.random.Generator) -> None:
        """Test HxWxC to 1xCxHxW and back."""
        arr = rng.random((8, 10, 3))
        t = to_tensor(arr)
        assert tuple(t.shape) == (1, 3, 8, 10)
        np.testing.assert_allclose(from_tensor(t), arr, atol=1e-6)

    def test_luma_weights(self) -> None:
        """Test BT.601 luminance of pure primaries."""
        arr = np.zeros((8, 8, 3))
        arr[:, :, 1] = 1.0
        np.testing.assert_allclose(luma(arr), 0.587)


class TestDatasetIndex:
    """Tests for the dataset index model."""

    def _entry(self, entry_id: str) -> DatasetEntry:
        return DatasetEntry(
            id=entry_id,
            ir_path=Path(f"ir/{entry_id}.png"),
            vis_path=Path(f"vis/{entry_id}.png"),
            height=8,
            width=8,
        )

    def test_entries_must_be_sorted(self) -> None:
        """Test that unsorted entries are rejected."""
        with pytest.raises(ValidationError):
            DatasetIndex(root=Path("."), entries=[self._entry("b"), self._entry("a")])

    def test_duplicate_ids_rejected(self) -> None:
        """Test that ids are unique."""
        with pytest.raises(ValidationError):
            DatasetIndex(root=Path("."), entries=[self._entry("a"), self._entry("a")])

    def test_lookup(self) -> None:
        """Test ids and length."""
        index = DatasetIndex(root=Path("."), entries=[self._entry("a"), self._entry("b")])
        assert index.ids == ["a", "b"]
        assert len(index) == 2
        assert not index.entries[0].has_masks

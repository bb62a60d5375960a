"""Synthetic dataset tests."""

import numpy as np
import pytest

from scalcodec import data
from scalcodec.errors import ContractError


def solid(r, g, b):
    img = np.zeros((1, 3, 4, 4), np.float32)
    img[0, 0], img[0, 1], img[0, 2] = r, g, b
    return img


class TestPaletteTargets:
    def test_hand_checked_colors(self):
        # palette 8: 2 luma bands times 4 hue sectors of width pi/2
        cases = [
            (solid(0.3, 0.0, 0.0), 0),   # dark red, hue 0
            (solid(1.0, 0.8, 0.8), 4),   # bright red
            (solid(0.0, 0.6, 0.0), 1),   # dark green, hue 2pi/3
            (solid(0.0, 0.0, 0.9), 2),   # dark blue, hue 4pi/3
            (solid(0.7, 0.7, 0.7), 4),   # gray falls in sector 0
        ]
        for img, want in cases:
            got = data.palette_targets(img, 8)
            assert (got == want).all(), (img[0, :, 0, 0], want, got[0, 0, 0])

    def test_labels_in_range(self):
        images = data.make_images(4, 32, seed=5)
        for p in (2, 4, 8):
            t = data.palette_targets(images, p)
            assert t.shape == (4, 32, 32)
            assert t.dtype == np.int64
            assert t.min() >= 0 and t.max() < p

    def test_deterministic(self):
        images = data.make_images(2, 32, seed=9)
        a = data.palette_targets(images, 8)
        b = data.palette_targets(images, 8)
        np.testing.assert_array_equal(a, b)

    def test_rejects_odd_palette(self):
        with pytest.raises(ContractError):
            data.palette_targets(np.zeros((1, 3, 4, 4), np.float32), 3)


class TestMakeImages:
    def test_shape_dtype_range(self):
        images = data.make_images(6, 48, seed=0)
        assert images.shape == (6, 3, 48, 48)
        assert images.dtype == np.float32
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_seed_controls_content(self):
        a = data.make_images(3, 32, seed=1)
        b = data.make_images(3, 32, seed=1)
        c = data.make_images(3, 32, seed=2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_families_differ(self):
        # the four generator families should not collapse to one texture
        images = data.make_images(4, 32, seed=3)
        flat = images.reshape(4, -1)
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.allclose(flat[i], flat[j])

    def test_family_subset(self):
        images = data.make_images(3, 32, seed=3, families=("checker",))
        assert images.shape == (3, 3, 32, 32)

    def test_unknown_family_rejected(self):
        with pytest.raises(ContractError, match="unknown texture"):
            data.make_images(1, 32, seed=0, families=("plasma",))

    def test_size_must_tile(self):
        with pytest.raises(ContractError, match="multiple"):
            data.make_images(1, 20, seed=0)
        with pytest.raises(ContractError):
            data.make_images(0, 32, seed=0)

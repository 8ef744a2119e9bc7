"""
Unit tests for the rotation/flip group.
"""

import numpy as np
import pytest

from mrfei.tensor import DiffTensor, ShapeError, gradcheck, mse_loss
from mrfei.transforms import (
    GROUP_ORDER,
    NON_IDENTITY_IDS,
    TRANSFORMS,
    apply_transform,
    compose,
    get_transform,
    sample_transforms,
    transform_tensor,
)


class TestGroup:
    """Tests for the eight transforms."""

    def test_ids_and_names(self):
        assert [tr.id for tr in TRANSFORMS] == list(range(GROUP_ORDER))
        assert get_transform(0).name == "identity"
        assert get_transform(1).name == "vflip"
        assert get_transform(7).name == "rot270+vflip"

    def test_all_distinct(self):
        probe = np.arange(16).reshape(4, 4)
        images = {apply_transform(i, probe).tobytes() for i in range(GROUP_ORDER)}
        assert len(images) == GROUP_ORDER

    def test_rot90_is_counter_clockwise(self):
        img = np.array([[1, 2], [3, 4]])
        np.testing.assert_array_equal(apply_transform(2, img), [[2, 4], [1, 3]])

    def test_vertical_flip(self):
        img = np.array([[1, 2], [3, 4]])
        np.testing.assert_array_equal(apply_transform(1, img), [[3, 4], [1, 2]])

    @pytest.mark.parametrize("tid", range(GROUP_ORDER))
    def test_inverse_is_exact(self, tid, rng):
        img = rng.normal(size=(2, 3, 6, 6))
        tr = get_transform(tid)
        np.testing.assert_array_equal(tr.inverse().apply(tr.apply(img)), img)

    def test_closure(self):
        for a in range(GROUP_ORDER):
            for b in range(GROUP_ORDER):
                assert 0 <= compose(a, b) < GROUP_ORDER
        assert compose(2, 2) == 4
        assert compose(1, 1) == 0

    def test_acts_on_last_axes(self, rng):
        img = rng.normal(size=(3, 4, 4))
        out = apply_transform(2, img)
        np.testing.assert_array_equal(out[1], np.rot90(img[1]))

    def test_non_square_rotation(self):
        with pytest.raises(ShapeError, match="square"):
            apply_transform(2, np.zeros((4, 6)))
        assert apply_transform(4, np.zeros((4, 6))).shape == (4, 6)

    def test_invalid_id(self):
        with pytest.raises(ValueError):
            get_transform(8)


class TestSampling:
    """Tests for sample_transforms."""

    def test_distinct_non_identity(self, rng):
        for _ in range(20):
            ids = sample_transforms(rng, 3)
            assert len(set(ids)) == 3
            assert 0 not in ids

    def test_all_seven(self, rng):
        assert sorted(sample_transforms(rng, 7)) == list(NON_IDENTITY_IDS)

    def test_count_range(self, rng):
        with pytest.raises(ValueError):
            sample_transforms(rng, 0)
        with pytest.raises(ValueError):
            sample_transforms(rng, 8)

    def test_seeded(self):
        a = sample_transforms(np.random.default_rng(5), 3)
        b = sample_transforms(np.random.default_rng(5), 3)
        assert a == b


class TestTransformTensor:
    """Tests for the differentiable transform."""

    @pytest.mark.parametrize("tid", [1, 2, 5, 7])
    def test_gradient(self, tid, rng):
        x = DiffTensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        target = DiffTensor(rng.normal(size=(1, 2, 4, 4)))
        assert gradcheck(lambda: mse_loss(transform_tensor(x, tid), target), [x]) < 1e-4

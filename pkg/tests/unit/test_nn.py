"""
Unit tests for parameter sets, checkpoints and the reconstruction U-Net.
"""

from pathlib import Path

import numpy as np
import pytest

from mrfei.nn import CheckpointError, OutputMode, ParameterSet, ReconNetwork
from mrfei.tensor import DiffTensor, ShapeError, gradcheck, mse_loss


class TestParameterSet:
    """Tests for ParameterSet."""

    def test_declaration_order_and_count(self):
        ps = ParameterSet()
        ps.add("b", np.zeros(3))
        ps.add("a", np.zeros((2, 2)))
        assert list(ps) == ["b", "a"]
        assert ps.count == 7
        assert "a" in ps

    def test_duplicate_name(self):
        ps = ParameterSet()
        ps.add("w", np.zeros(1))
        with pytest.raises(KeyError):
            ps.add("w", np.zeros(1))

    def test_set_trainable(self):
        ps = ParameterSet()
        w = ps.add("w", np.ones(2))
        w.grad = np.ones(2)
        ps.set_trainable(False)
        assert not w.requires_grad
        assert w.grad is None

    def test_digest_tracks_values(self):
        ps = ParameterSet()
        w = ps.add("w", np.ones(2))
        before = ps.digest()
        w.values[0] = 2.0
        assert ps.digest() != before

    def test_save_load(self, temp_dir: Path):
        ps = ParameterSet()
        ps.add("w", np.arange(6.0).reshape(2, 3))
        ps.save(temp_dir / "p", {"note": "x"})
        other = ParameterSet()
        other.add("w", np.zeros((2, 3)))
        manifest = other.load(temp_dir / "p")
        assert manifest["note"] == "x"
        np.testing.assert_array_equal(other["w"].values, np.arange(6.0).reshape(2, 3))

    def test_load_shape_mismatch(self, temp_dir: Path):
        ps = ParameterSet()
        ps.add("w", np.zeros(3))
        ps.save(temp_dir / "p")
        other = ParameterSet()
        other.add("w", np.zeros(4))
        with pytest.raises(CheckpointError) as exc:
            other.load(temp_dir / "p")
        assert exc.value.parameter == "w"

    def test_load_missing_parameter(self, temp_dir: Path):
        ps = ParameterSet()
        ps.add("w", np.zeros(3))
        ps.save(temp_dir / "p")
        other = ParameterSet()
        other.add("v", np.zeros(3))
        with pytest.raises(CheckpointError, match="lacks"):
            other.load(temp_dir / "p")


class TestReconNetwork:
    """Tests for the U-Net."""

    def test_output_shape(self, rng):
        net = ReconNetwork(6, 4, OutputMode.QMAP, depth=2, base_channels=4)
        out = net(DiffTensor(rng.normal(size=(2, 6, 8, 8))))
        assert out.shape == (2, 4, 8, 8)

    def test_tsmi_output_channels(self, rng):
        net = ReconNetwork(6, 6, OutputMode.TSMI, depth=1, base_channels=4)
        assert net(DiffTensor(rng.normal(size=(1, 6, 4, 4)))).shape == (1, 6, 4, 4)

    def test_qmap_needs_four_channels(self):
        with pytest.raises(ShapeError):
            ReconNetwork(6, 5, OutputMode.QMAP)

    def test_rejects_indivisible_size(self, rng):
        net = ReconNetwork(2, 4, OutputMode.QMAP, depth=2, base_channels=2)
        with pytest.raises(ShapeError, match="divisible"):
            net(DiffTensor(rng.normal(size=(1, 2, 6, 6))))

    def test_rejects_wrong_channels(self, rng):
        net = ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2)
        with pytest.raises(ShapeError):
            net(DiffTensor(rng.normal(size=(1, 3, 4, 4))))

    def test_zero_head_outputs_zero(self, rng):
        net = ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2, zero_head=True)
        out = net(DiffTensor(rng.normal(size=(1, 2, 4, 4))))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_head_bias(self, rng):
        net = ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2, head_bias=(1.0, 0.1, 0.5, 0.0))
        np.testing.assert_array_equal(net.params["head.bias"].values, [1.0, 0.1, 0.5, 0.0])
        with pytest.raises(ShapeError):
            ReconNetwork(2, 4, OutputMode.QMAP, head_bias=(1.0, 2.0))

    def test_seeded_init_is_reproducible(self):
        a = ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2, seed=3)
        b = ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2, seed=3)
        assert a.params.digest() == b.params.digest()

    def test_no_input_skip(self, rng):
        # a zero input still produces the head bias, not the input
        net = ReconNetwork(4, 4, OutputMode.QMAP, depth=1, base_channels=2, head_bias=(1.0, 2.0, 3.0, 4.0))
        out = net(DiffTensor(np.zeros((1, 4, 4, 4))))
        np.testing.assert_allclose(out.values[0, :, 0, 0], [1.0, 2.0, 3.0, 4.0])

    def test_gradients(self, rng):
        net = ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2, seed=1)
        x = DiffTensor(rng.normal(size=(1, 2, 4, 4)))
        target = DiffTensor(rng.normal(size=(1, 4, 4, 4)))
        params = list(net.params.values())
        assert gradcheck(lambda: mse_loss(net(x), target), params, max_checks=4, rng=rng) < 1e-4

    def test_save_load(self, temp_dir: Path, rng):
        net = ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2, seed=5)
        net.save(temp_dir / "model", {"norm": 2.5})
        loaded, manifest = ReconNetwork.load(temp_dir / "model")
        assert manifest["norm"] == 2.5
        assert loaded.mode is OutputMode.QMAP
        x = DiffTensor(rng.normal(size=(1, 2, 4, 4)))
        np.testing.assert_array_equal(loaded(x).values, net(x).values)

    def test_load_without_description(self, temp_dir: Path):
        ps = ParameterSet()
        ps.add("w", np.zeros(1))
        ps.save(temp_dir / "bare")
        with pytest.raises(CheckpointError, match="no network"):
            ReconNetwork.load(temp_dir / "bare")

"""
Unit tests for losses, the forward model and the training loop.
"""

import csv
from pathlib import Path

import numpy as np
import pytest

from mrfei.acquisition import complex_to_pairs, tsmi_to_channels
from mrfei.nn import OutputMode, ReconNetwork
from mrfei.phantom import KSpaceData, MrfDataset, QMaps, Tsmi, build_dataset
from mrfei.sequence import T1_DOMAIN, T2_DOMAIN
from mrfei.surrogate import BlochSurrogate
from mrfei.tensor import DiffTensor, ShapeError
from mrfei.training import (
    EpochRecord,
    ForwardModel,
    TrainConfig,
    Trainer,
    TrainHistory,
    TrainingError,
    TrainMode,
    backprojection_input,
    ei_to_qmaps,
    equivariance_gap,
    loss_ei,
    loss_mc,
    normalization_constant,
    reconstruct,
    train,
)


@pytest.fixture(scope="module")
def tiny_dataset(short_schedule, small_operator) -> MrfDataset:
    return build_dataset(2, 1, small_operator, short_schedule, seed=11, n_states=16, keep_train_ground_truth=True)


@pytest.fixture
def surrogate(small_basis) -> BlochSurrogate:
    return BlochSurrogate(small_basis.t, T1_DOMAIN, T2_DOMAIN, hidden=8, basis_digest=small_basis.digest(), seed=1)


def tiny_config(mode: str, **kwargs) -> TrainConfig:
    base = {"epochs": 2, "batch_size": 2, "lr": 1e-3, "lr_drop_epoch": None, "depth": 1, "base_channels": 4}
    return TrainConfig(mode=mode, **{**base, **kwargs})


class TestTrainConfig:
    """Tests for TrainConfig."""

    def test_mode_from_string(self):
        assert TrainConfig(mode="ei").mode is TrainMode.EI

    def test_negative_alpha(self):
        with pytest.raises(TrainingError, match="alpha"):
            TrainConfig(alpha=-1.0)

    def test_positive_epochs(self):
        with pytest.raises(TrainingError):
            TrainConfig(epochs=0)

    def test_ei_active(self):
        assert TrainConfig(mode="nlei", alpha=1e-4).ei_active
        assert not TrainConfig(mode="nlei", alpha=0.0).ei_active
        assert not TrainConfig(mode="nlei", alpha=1.0, use_ei=False).ei_active
        assert not TrainConfig(mode="supervised", alpha=1.0).ei_active

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.lr_drop_epoch, cfg.weight_decay) == (1000, 2, 5e-4, 300, 1e-8)
        assert cfg.n_transforms_per_iter == 3
        assert cfg.schedule().lr_at(300) == pytest.approx(5e-5)

    def test_to_dict(self):
        data = TrainConfig(mode="ei", debug_transforms=(1, 2)).to_dict()
        assert data["mode"] == "ei"
        assert data["debug_transforms"] == [1, 2]

    def test_output_modes(self):
        assert TrainMode.EI.output_mode is OutputMode.TSMI
        assert TrainMode.NLEI.output_mode is OutputMode.QMAP
        assert TrainMode.SUPERVISED.output_mode is OutputMode.QMAP


class TestForwardModel:
    """Tests for ForwardModel and the normalisation helpers."""

    def test_surrogate_dimension(self, small_operator):
        with pytest.raises(ShapeError):
            ForwardModel(small_operator, BlochSurrogate(small_operator.t + 1, T1_DOMAIN, T2_DOMAIN, hidden=4))

    def test_invalid_norm(self, small_operator):
        with pytest.raises(TrainingError):
            ForwardModel(small_operator, norm=0.0)

    def test_measure_shapes(self, small_operator, surrogate, rng):
        model = ForwardModel(small_operator, surrogate)
        q = DiffTensor(np.abs(rng.normal(size=(2, 4, 16, 16))) + 0.1)
        assert model.measure(q).shape == (2, 2, small_operator.m, small_operator.T)
        assert model.output_mode is OutputMode.QMAP
        assert ForwardModel(small_operator).output_mode is OutputMode.TSMI

    def test_predict_masks_output(self, small_operator, rng):
        model = ForwardModel(small_operator, norm=2.0)
        net = ReconNetwork(2 * small_operator.t, 2 * small_operator.t, OutputMode.TSMI, depth=1, base_channels=2, head_bias=np.ones(12))
        mask = np.zeros((1, 16, 16), dtype=bool)
        mask[0, 4:8, 4:8] = True
        out = model.predict(net, DiffTensor(rng.normal(size=(1, 12, 16, 16))), mask)
        assert np.all(out.values[0, :, ~mask[0]] == 0)
        assert np.any(out.values[0, :, mask[0]] != 0)

    def test_network_input_matches_backprojection(self, small_operator, tiny_dataset):
        model = ForwardModel(small_operator, norm=3.0)
        y = tiny_dataset.train[0].kspace.samples[None]
        via_graph = model.network_input(DiffTensor(complex_to_pairs(y))).values
        np.testing.assert_allclose(via_graph, backprojection_input(small_operator, y, 3.0), atol=1e-12)

    def test_normalization_constant(self, small_operator, tiny_dataset):
        items = tiny_dataset.train
        norm = normalization_constant(small_operator, [s.kspace for s in items], [s.head_mask for s in items])
        assert norm > 0
        zero = KSpaceData(np.zeros((small_operator.m, small_operator.T), dtype=complex), "")
        assert normalization_constant(small_operator, [zero], [items[0].head_mask]) == 1.0


class TestLosses:
    """Tests for loss_mc and loss_ei."""

    def test_mc_zero_at_truth(self, small_operator, tiny_dataset):
        s = tiny_dataset.train[0]
        x = DiffTensor(tsmi_to_channels(s.tsmi.data[None], 16, 16))
        y = DiffTensor(complex_to_pairs(s.kspace.samples[None]))
        assert loss_mc(x, y, ForwardModel(small_operator)).item() == pytest.approx(0.0, abs=1e-20)

    def test_per_item_equals_flat_for_equal_draws(self, small_operator, surrogate, rng):
        model = ForwardModel(small_operator, surrogate)
        net = ReconNetwork(12, 4, OutputMode.QMAP, depth=1, base_channels=2, seed=3, head_bias=(1.0, 0.1, 0.5, 0.0))
        masks = np.ones((2, 16, 16), dtype=bool)
        q = model.predict(net, DiffTensor(rng.normal(size=(2, 12, 16, 16))), masks)
        flat = loss_ei(net, q, model, [1, 4, 7], masks).item()
        per_item = loss_ei(net, q, model, [[1, 4, 7], [1, 4, 7]], masks).item()
        assert per_item == pytest.approx(flat, rel=1e-10)

    def test_per_item_count(self, small_operator, surrogate, rng):
        model = ForwardModel(small_operator, surrogate)
        net = ReconNetwork(12, 4, OutputMode.QMAP, depth=1, base_channels=2)
        q = DiffTensor(rng.normal(size=(2, 4, 16, 16)))
        with pytest.raises(ShapeError):
            loss_ei(net, q, model, [[1, 2]], np.ones((2, 16, 16), dtype=bool))

    def test_stop_grad_blocks_direct_path(self, small_operator, surrogate, rng):
        model = ForwardModel(small_operator, surrogate)
        net = ReconNetwork(12, 4, OutputMode.QMAP, depth=1, base_channels=2, seed=4, head_bias=(1.0, 0.1, 0.5, 0.0))
        masks = np.ones((1, 16, 16), dtype=bool)
        leaf = DiffTensor(np.abs(rng.normal(size=(1, 4, 16, 16))) + 0.1, requires_grad=True)
        loss_ei(net, leaf, model, [2], masks, stop_grad=True).backward()
        assert leaf.grad is None
        loss_ei(net, leaf, model, [2], masks, stop_grad=False).backward()
        assert leaf.grad is not None


class TestTrainer:
    """Tests for the training loop."""

    def test_nlei_needs_surrogate(self, tiny_dataset):
        with pytest.raises(TrainingError, match="surrogate"):
            Trainer(tiny_config("nlei"), tiny_dataset)

    def test_supervised_needs_ground_truth(self, short_schedule, small_operator):
        ds = build_dataset(1, 1, small_operator, short_schedule, seed=2, n_states=16)
        with pytest.raises(TrainingError, match="ground truth"):
            Trainer(tiny_config("supervised"), ds)

    def test_network_mode_mismatch(self, tiny_dataset, surrogate):
        net = ReconNetwork(12, 12, OutputMode.TSMI, depth=1, base_channels=2)
        with pytest.raises(TrainingError, match="does not fit"):
            Trainer(tiny_config("nlei"), tiny_dataset, surrogate=surrogate, network=net)

    def test_zero_alpha_is_data_consistency_only(self, tiny_dataset, surrogate):
        trainer = Trainer(tiny_config("nlei", alpha=0.0), tiny_dataset, surrogate=surrogate)
        main, ei, total = trainer.step_losses(np.array([0, 1]))
        assert ei is None
        assert total.item() == main.item()

    def test_ei_term_weighted(self, tiny_dataset, surrogate):
        trainer = Trainer(tiny_config("nlei", alpha=0.5, debug_transforms=(2,)), tiny_dataset, surrogate=surrogate)
        main, ei, total = trainer.step_losses(np.array([0, 1]))
        assert ei is not None
        assert total.item() == pytest.approx(main.item() + 0.5 * ei.item())

    def test_transform_draws(self, tiny_dataset, surrogate):
        trainer = Trainer(tiny_config("nlei", alpha=1.0, per_item_transforms=True), tiny_dataset, surrogate=surrogate)
        draws = trainer._draw_transforms(2)
        assert len(draws) == 2
        assert all(len(ids) == 3 and 0 not in ids for ids in draws)

    def test_fit_writes_run_directory(self, temp_dir: Path, tiny_dataset, surrogate):
        run = temp_dir / "run"
        before = surrogate.digest()
        result = Trainer(
            tiny_config("nlei", alpha=1e-4, checkpoint_every=1),
            tiny_dataset,
            surrogate=surrogate,
            run_dir=run,
        ).fit()
        assert surrogate.digest() == before
        assert len(result.history.records) == 2
        for name in ("config.json", "loss.csv", "model.json", "model.bin", "manifest.json"):
            assert (run / name).exists()
        assert (run / "checkpoints" / "epoch_00002.json").exists()
        with open(run / "loss.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "L_MC", "L_EI", "total"]
        assert len(rows) == 3
        assert result.manifest["surrogate_digest"] == before

    def test_seeded_runs_are_identical(self, tiny_dataset):
        a = Trainer(tiny_config("ei", alpha=1e-2, seed=5), tiny_dataset).fit()
        b = Trainer(tiny_config("ei", alpha=1e-2, seed=5), tiny_dataset).fit()
        assert a.network.params.digest() == b.network.params.digest()
        assert a.history.totals() == b.history.totals()

    def test_supervised_loss_decreases(self, tiny_dataset):
        result = Trainer(tiny_config("supervised", epochs=25, lr=3e-3), tiny_dataset).fit()
        totals = result.history.totals()
        assert totals[-1] < totals[0]

    def test_progress_callback(self, tiny_dataset):
        calls = []
        Trainer(tiny_config("ei"), tiny_dataset, progress=lambda e, n, loss: calls.append((e, n))).fit()
        assert calls == [(1, 2), (2, 2)]

    def test_train_overrides_mode(self, tiny_dataset):
        result = train("supervised", tiny_dataset, tiny_config("nlei", epochs=1))
        assert result.config.mode is TrainMode.SUPERVISED
        assert result.network.mode is OutputMode.QMAP


class TestReconstruct:
    """Tests for reconstruct, ei_to_qmaps and equivariance_gap."""

    def test_qmaps_clamped_and_masked(self, small_operator, tiny_dataset):
        net = ReconNetwork(12, 4, OutputMode.QMAP, depth=1, base_channels=2, head_bias=(99.0, -5.0, 0.5, 0.0))
        s = tiny_dataset.test[0]
        q = reconstruct(net, s.kspace, small_operator, 1.0, s.head_mask)
        assert isinstance(q, QMaps)
        inside = s.head_mask & (np.abs(q.pd) > 0)
        assert np.all(q.t1_s[inside] <= T1_DOMAIN[1])
        assert np.all(q.t2_s[inside] >= T2_DOMAIN[0])
        assert np.all(q.t1_s[~s.head_mask] == 0)
        q.validate()

    def test_tsmi_output(self, small_operator, tiny_dataset):
        net = ReconNetwork(12, 12, OutputMode.TSMI, depth=1, base_channels=2)
        s = tiny_dataset.test[0]
        x = reconstruct(net, s.kspace, small_operator, 2.0, s.head_mask)
        assert isinstance(x, Tsmi)
        assert x.data.shape == (256, 6)
        assert np.all(x.data[~s.head_mask.ravel()] == 0)

    def test_shape_checks(self, small_operator, tiny_dataset):
        net = ReconNetwork(10, 4, OutputMode.QMAP, depth=1, base_channels=2)
        with pytest.raises(ShapeError):
            reconstruct(net, tiny_dataset.test[0].kspace, small_operator)
        bad = KSpaceData(np.zeros((3, 3), dtype=complex), "")
        with pytest.raises(ShapeError):
            reconstruct(ReconNetwork(12, 4, OutputMode.QMAP, depth=1), bad, small_operator)

    def test_ei_to_qmaps(self, small_operator, small_dictionary, small_basis, tiny_dataset):
        s = tiny_dataset.test[0]
        compressed = small_dictionary.compress(small_basis)
        qnet = ReconNetwork(12, 4, OutputMode.QMAP, depth=1, base_channels=2)
        with pytest.raises(TrainingError):
            ei_to_qmaps(qnet, s.kspace, small_operator, compressed, s.head_mask)
        tnet = ReconNetwork(12, 12, OutputMode.TSMI, depth=1, base_channels=2, seed=2)
        result = ei_to_qmaps(tnet, s.kspace, small_operator, compressed, s.head_mask)
        assert result.t1_s.shape == (16, 16)

    def test_equivariance_gap(self, small_operator, surrogate, tiny_dataset):
        net = ReconNetwork(12, 4, OutputMode.QMAP, depth=1, base_channels=2, head_bias=(1.0, 0.1, 0.5, 0.0))
        model = ForwardModel(small_operator, surrogate)
        s = tiny_dataset.test[0]
        gap = equivariance_gap(net, model, [s.kspace], [s.head_mask], transform_ids=(1, 2))
        assert gap >= 0.0
        assert equivariance_gap(net, model, [], []) == 0.0


class TestTrainHistory:
    """Tests for TrainHistory."""

    def test_csv_round_trip(self, temp_dir: Path):
        history = TrainHistory()
        history.append(EpochRecord(0, 0.5, 0.25, 0.75))
        history.append(EpochRecord(1, 0.1 + 0.2, 0.0, 0.1 + 0.2))
        history.write_csv(temp_dir / "loss.csv")
        with open(temp_dir / "loss.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert float(rows[1]["L_MC"]) == 0.1 + 0.2
        assert history.totals() == [0.75, 0.1 + 0.2]

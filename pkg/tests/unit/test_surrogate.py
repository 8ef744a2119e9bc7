"""
Unit tests for the Bloch response surrogate.
"""

from pathlib import Path

import numpy as np
import pytest

from mrfei.nn import OutputMode, ReconNetwork
from mrfei.sequence import T1_DOMAIN, T2_DOMAIN
from mrfei.surrogate import (
    BlochSurrogate,
    SurrogateError,
    apply_surrogate,
    held_out_error,
    relative_rms_error,
    sample_probe_pairs,
    train_surrogate,
)
from mrfei.tensor import DiffTensor, ShapeError, gradcheck, mse_loss


def qmap_channels(rng: np.random.Generator, n: int = 1, size: int = 3) -> np.ndarray:
    q = np.empty((n, 4, size, size))
    q[:, 0] = rng.uniform(0.5, 2.0, size=(n, size, size))
    q[:, 1] = rng.uniform(0.05, 0.5, size=(n, size, size))
    q[:, 2:] = rng.normal(size=(n, 2, size, size))
    return q


@pytest.fixture
def surrogate() -> BlochSurrogate:
    return BlochSurrogate(4, T1_DOMAIN, T2_DOMAIN, hidden=16, seed=2)


@pytest.fixture(scope="module")
def fitted(small_dictionary, small_basis) -> tuple[BlochSurrogate, list[float]]:
    losses: list[float] = []
    model = train_surrogate(
        small_dictionary.compress(small_basis),
        epochs=60,
        lr=1e-3,
        hidden=32,
        seed=0,
        progress=lambda done, total, loss: losses.append(loss),
    )
    return model, losses


class TestBlochSurrogate:
    """Tests for the surrogate network."""

    def test_evaluate_shape(self, surrogate):
        out = surrogate.evaluate(np.array([1.0, 2.0]), np.array([0.1, 0.2]))
        assert out.shape == (2, 4)
        assert np.iscomplexobj(out)

    def test_linear_in_pd(self, surrogate, rng):
        q = qmap_channels(rng)
        doubled = q.copy()
        doubled[:, 2:] *= 2.0
        a = apply_surrogate(surrogate, DiffTensor(q)).values
        b = apply_surrogate(surrogate, DiffTensor(doubled)).values
        np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12)

    def test_complex_pd_product(self, surrogate, rng):
        q = qmap_channels(rng, size=1)
        u = surrogate.evaluate(q[:, 0, 0, 0], q[:, 1, 0, 0])[0]
        pd = q[0, 2, 0, 0] + 1j * q[0, 3, 0, 0]
        x = surrogate(DiffTensor(q)).values[0, :, 0, 0]
        np.testing.assert_allclose(x[:4] + 1j * x[4:], pd * u, rtol=1e-10)

    def test_clamps_to_box(self, surrogate):
        inside = surrogate.evaluate(np.array([T1_DOMAIN[1]]), np.array([T2_DOMAIN[1]]))
        outside = surrogate.evaluate(np.array([50.0]), np.array([9.0]))
        np.testing.assert_allclose(outside, inside)

    def test_channel_check(self, surrogate):
        with pytest.raises(ShapeError):
            apply_surrogate(surrogate, DiffTensor(np.ones((1, 3, 2, 2))))
        with pytest.raises(ShapeError):
            surrogate.response(DiffTensor(np.ones((1, 3, 2, 2))))

    def test_frozen_surrogate_passes_input_gradients(self, surrogate, rng):
        surrogate.freeze()
        assert surrogate.frozen
        q = DiffTensor(qmap_channels(rng), requires_grad=True)
        target = DiffTensor(rng.normal(size=(1, 8, 3, 3)))
        assert gradcheck(lambda: mse_loss(surrogate(q), target), [q], max_checks=12, rng=rng) < 1e-4
        assert all(p.grad is None for p in surrogate.params.values())

    def test_unfreeze(self, surrogate):
        surrogate.freeze()
        surrogate.unfreeze()
        assert not surrogate.frozen


class TestSurrogateIO:
    """Tests for surrogate checkpoints."""

    def test_round_trip(self, temp_dir: Path, surrogate):
        surrogate.fit_report = {"relative_rms": 0.01}
        surrogate.save(temp_dir / "s")
        loaded = BlochSurrogate.load(temp_dir / "s")
        assert loaded.digest() == surrogate.digest()
        assert loaded.fit_report == {"relative_rms": 0.01}
        t1, t2 = np.array([0.7]), np.array([0.06])
        np.testing.assert_array_equal(loaded.evaluate(t1, t2), surrogate.evaluate(t1, t2))

    def test_basis_mismatch(self, temp_dir: Path, fitted, small_basis, rng):
        model, _ = fitted
        model.save(temp_dir / "s")
        assert BlochSurrogate.load(temp_dir / "s", small_basis).basis_digest == small_basis.digest()
        from mrfei.subspace import fit_basis

        other = fit_basis(rng.normal(size=(30, small_basis.T)) + 0j, small_basis.t)
        with pytest.raises(SurrogateError, match="different basis"):
            BlochSurrogate.load(temp_dir / "s", other)

    def test_not_a_surrogate(self, temp_dir: Path):
        ReconNetwork(2, 4, OutputMode.QMAP, depth=1, base_channels=2).save(temp_dir / "net")
        with pytest.raises(SurrogateError, match="not a surrogate"):
            BlochSurrogate.load(temp_dir / "net")


class TestTrainSurrogate:
    """Tests for train_surrogate."""

    def test_needs_compressed_dictionary(self, small_dictionary):
        with pytest.raises(SurrogateError, match="compressed"):
            train_surrogate(small_dictionary, epochs=1)

    def test_result_is_frozen(self, fitted, small_basis):
        model, _ = fitted
        assert model.frozen
        assert model.basis_digest == small_basis.digest()
        assert set(model.fit_report) == {"final_loss", "relative_rms", "epochs"}

    def test_loss_decreases(self, fitted):
        _, losses = fitted
        assert len(losses) == 60
        assert losses[-1] < losses[0]

    def test_box_from_dictionary_grid(self, fitted, small_dictionary):
        model, _ = fitted
        assert model.t1_range == (small_dictionary.grid[:, 0].min(), small_dictionary.grid[:, 0].max())

    def test_relative_rms_matches_report(self, fitted, small_dictionary, small_basis):
        model, _ = fitted
        compressed = small_dictionary.compress(small_basis)
        err = relative_rms_error(model, compressed.grid[:, 0], compressed.grid[:, 1], compressed.atoms)
        assert err == pytest.approx(model.fit_report["relative_rms"])


class TestHeldOutError:
    """Tests for scoring a surrogate on pairs outside the dictionary grid."""

    def test_probe_pairs_inside_box(self):
        pairs = sample_probe_pairs((0.1, 3.0), (0.01, 1.0), n=300, seed=4)
        assert pairs.shape == (300, 2)
        assert np.all((pairs[:, 0] >= 0.1) & (pairs[:, 0] <= 3.0))
        assert np.all((pairs[:, 1] >= 0.01) & (pairs[:, 1] <= 1.0))

    def test_probe_pairs_seeded(self):
        a = sample_probe_pairs((0.1, 3.0), (0.01, 1.0), n=20, seed=4)
        b = sample_probe_pairs((0.1, 3.0), (0.01, 1.0), n=20, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_probe_pairs_t2_below_t1(self):
        pairs = sample_probe_pairs((0.01, 6.0), (0.004, 4.0), n=150, seed=0, t2_below_t1=True)
        assert pairs.shape == (150, 2)
        assert np.all(pairs[:, 1] <= pairs[:, 0])

    def test_recorded_in_fit_report(self, small_dictionary, small_basis, short_schedule):
        model = train_surrogate(small_dictionary.compress(small_basis), epochs=20, hidden=16, seed=1)
        err = held_out_error(model, short_schedule, small_basis, n=50, seed=3, n_states=16)
        assert np.isfinite(err) and err > 0
        assert model.fit_report["held_out_relative_rms"] == err
        assert "held_out_relative_rms" in model.describe()["fit"]

    def test_wrong_basis(self, surrogate, short_schedule, small_basis):
        with pytest.raises(SurrogateError, match="Basis"):
            held_out_error(surrogate, short_schedule, small_basis, n=10)

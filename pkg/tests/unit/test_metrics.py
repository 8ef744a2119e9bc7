"""
Unit tests for mrfei.metrics module.
"""

import numpy as np
import pytest

from mrfei.metrics import (
    PSNR_CAP_DB,
    MetricError,
    MetricReport,
    evaluate_qmaps,
    gaussian_window,
    mae,
    mape,
    normalized_pd_magnitude,
    psnr,
    qmap_metrics,
    ssim,
    tsmi_psnr,
)
from mrfei.phantom import QMaps, Tsmi, make_brain_phantom


@pytest.fixture(scope="module")
def phantom() -> QMaps:
    return make_brain_phantom(32, 32, seed=3)


@pytest.fixture
def box_mask() -> np.ndarray:
    mask = np.zeros((24, 24), dtype=bool)
    mask[4:20, 4:20] = True
    return mask


class TestPixelMetrics:
    """Tests for MAE, MAPE and PSNR."""

    def test_mae_constant_offset(self, box_mask):
        truth = np.ones((24, 24))
        assert mae(truth + 0.25, truth, box_mask) == pytest.approx(0.25)

    def test_out_of_mask_ignored(self, box_mask):
        truth = np.ones((24, 24))
        pred = truth.copy()
        pred[~box_mask] = 1e6
        assert mae(pred, truth, box_mask) == 0.0
        assert psnr(pred, truth, box_mask, 1.0) == PSNR_CAP_DB

    def test_mape_excludes_zero_truth(self, box_mask):
        truth = np.full((24, 24), 2.0)
        truth[5, 5] = 0.0
        pred = truth * 1.1
        pred[5, 5] = 7.0
        assert mape(pred, truth, box_mask) == pytest.approx(10.0)

    def test_mape_all_zero(self, box_mask):
        with pytest.raises(MetricError):
            mape(np.ones((24, 24)), np.zeros((24, 24)), box_mask)

    def test_psnr_known_value(self, box_mask):
        truth = np.zeros((24, 24))
        assert psnr(truth + 0.01, truth, box_mask, 1.0) == pytest.approx(40.0)

    def test_psnr_cap(self, box_mask):
        truth = np.ones((24, 24))
        assert psnr(truth, truth, box_mask, 6.0) == PSNR_CAP_DB

    def test_empty_mask(self):
        with pytest.raises(MetricError, match="empty"):
            mae(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4), dtype=bool))

    def test_shape_mismatch(self, box_mask):
        with pytest.raises(MetricError):
            mae(np.ones((24, 24)), np.ones((23, 24)), box_mask)


class TestSsim:
    """Tests for the SSIM implementation."""

    def test_window_normalised(self):
        w = gaussian_window()
        assert w.shape == (7, 7)
        assert w.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(w, w.T)

    def test_identical_images(self, box_mask, rng):
        img = rng.uniform(0, 1, size=(24, 24))
        assert ssim(img, img, box_mask, 1.0) == pytest.approx(1.0)

    def test_degrades_with_noise(self, box_mask, rng):
        img = rng.uniform(0, 1, size=(24, 24))
        low = ssim(img + 0.01 * rng.normal(size=img.shape), img, box_mask, 1.0)
        high = ssim(img + 0.3 * rng.normal(size=img.shape), img, box_mask, 1.0)
        assert 1.0 > low > high

    def test_no_interior_window(self):
        mask = np.zeros((24, 24), dtype=bool)
        mask[0:2, 0:2] = True
        with pytest.raises(MetricError, match="full SSIM window"):
            ssim(np.ones((24, 24)), np.ones((24, 24)), mask, 1.0)

    def test_needs_2d(self, box_mask):
        with pytest.raises(MetricError):
            ssim(np.ones((2, 24, 24)), np.ones((2, 24, 24)), box_mask, 1.0)


class TestQMapMetrics:
    """Tests for per-slice and averaged QMap metrics."""

    def test_pd_normalised(self, phantom):
        mag = normalized_pd_magnitude(phantom.pd, phantom.head_mask)
        assert mag.max() == pytest.approx(1.0)
        assert np.all(mag[~phantom.head_mask] == 0)

    def test_perfect_reconstruction(self, phantom):
        values = qmap_metrics(phantom, phantom)
        for name in ("T1", "T2", "PD"):
            assert values[name]["MAE"] == 0.0
            assert values[name]["MAPE"] == 0.0
            assert values[name]["PSNR"] == PSNR_CAP_DB
            assert values[name]["SSIM"] == pytest.approx(1.0)

    def test_pd_scale_invariant(self, phantom):
        scaled = QMaps(phantom.t1_s, phantom.t2_s, 3 * phantom.pd_re, 3 * phantom.pd_im, phantom.head_mask)
        assert qmap_metrics(scaled, phantom)["PD"]["MAE"] == pytest.approx(0.0, abs=1e-12)

    def test_evaluate_averages(self, phantom):
        worse = QMaps(phantom.t1_s * 1.2, phantom.t2_s, phantom.pd_re, phantom.pd_im, phantom.head_mask)
        report = evaluate_qmaps("m", [phantom, worse], [phantom, phantom], config_hash="abc")
        assert report.get("T1", "MAPE") == pytest.approx(10.0)
        assert len(report.per_slice) == 2
        assert report.to_dict()["config_hash"] == "abc"

    def test_evaluate_mismatched_lists(self, phantom):
        with pytest.raises(MetricError):
            evaluate_qmaps("m", [phantom], [])

    def test_evaluate_with_tsmi(self, phantom, rng):
        data = (rng.normal(size=(32 * 32, 3)) + 1j * rng.normal(size=(32 * 32, 3))) * phantom.head_mask.ravel()[:, None]
        x = Tsmi(data, (32, 32))
        report = evaluate_qmaps("m", [phantom], [phantom], [x], [x])
        assert report.tsmi == {"PSNR": PSNR_CAP_DB, "SSIM": pytest.approx(1.0)}
        assert tsmi_psnr(x, x, phantom.head_mask) == PSNR_CAP_DB


class TestMetricReport:
    """Tests for MetricReport."""

    def test_row_and_average(self):
        values = {name: {"MAE": 1.0, "MAPE": m, "PSNR": 30.0, "SSIM": 0.9} for name, m in zip(("T1", "T2", "PD"), (3.0, 6.0, 9.0))}
        report = MetricReport("nlei", values, tsmi={"PSNR": 20.0})
        assert report.averaged("MAPE") == pytest.approx(6.0)
        row = report.row()
        assert row["method"] == "nlei"
        assert row["MAPE_T2"] == 6.0
        assert row["TSMI_PSNR"] == 20.0

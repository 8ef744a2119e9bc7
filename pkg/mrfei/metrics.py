"""
Image quality metrics for QMaps and TSMIs.

All metrics are computed inside a boolean head mask. Both images are zeroed
outside the mask first, so out-of-mask pixels never influence a value.

Data ranges are fixed per map: 6 s for T1, 4 s for T2 and 1 for PD, where PD
is compared as its magnitude normalised by its own in-mask maximum.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from mrfei.phantom import QMaps, Tsmi

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 300.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

MAPS = ("T1", "T2", "PD")
METRICS = ("MAE", "MAPE", "PSNR", "SSIM")
DATA_RANGES = {"T1": 6.0, "T2": 4.0, "PD": 1.0}
# True where a larger value is better
HIGHER_IS_BETTER = {"MAE": False, "MAPE": False, "PSNR": True, "SSIM": True}


class MetricError(ValueError):
    """Exception raised for empty masks or mismatched images."""

    def __init__(self, message: str, metric: str | None = None):
        self.message = message
        self.metric = metric
        super().__init__(self.message)


def _prepare(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray, metric: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape or truth.shape[-mask.ndim :] != mask.shape:
        raise MetricError(f"Shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}", metric)
    if not mask.any():
        raise MetricError("Head mask is empty", metric)
    return np.where(mask, pred, 0), np.where(mask, truth, 0), mask


def mae(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over in-mask voxels."""
    p, t, m = _prepare(pred, truth, mask, "MAE")
    return float(np.mean(np.abs(p - t)[..., m]))


def mape(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """
    Mean absolute percentage error over in-mask voxels, in percent.

    Voxels where the truth is zero are excluded.
    """
    p, t, m = _prepare(pred, truth, mask, "MAPE")
    keep = m & (t != 0)
    if not keep.any():
        raise MetricError("No in-mask voxel with non-zero truth", "MAPE")
    return float(100.0 * np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep])))


def psnr(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray, data_range: float) -> float:
    """10 log10(range^2 / in-mask MSE), capped at ``PSNR_CAP_DB`` for exact matches."""
    p, t, m = _prepare(pred, truth, mask, "PSNR")
    err = float(np.mean(np.abs(p - t)[..., m] ** 2))
    if err == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * math.log10(data_range**2 / err)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 2-D Gaussian window."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred: np.ndarray, truth: np.ndarray, data_range: float) -> np.ndarray:
    """Local SSIM at every pixel; only interior pixels have a full window."""
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)

    mu_x = ndimage.correlate(x, w, mode="constant")
    mu_y = ndimage.correlate(y, w, mode="constant")
    sxx = ndimage.correlate(x * x, w, mode="constant") - mu_x**2
    syy = ndimage.correlate(y * y, w, mode="constant") - mu_y**2
    sxy = ndimage.correlate(x * y, w, mode="constant") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray, data_range: float) -> float:
    """
    Gaussian-window SSIM averaged over in-mask window centres.

    Only windows lying fully inside the image are used.

    Raises:
        MetricError: Empty mask, or no in-mask pixel has a full window
    """
    p, t, m = _prepare(pred, truth, mask, "SSIM")
    if p.ndim != 2:
        raise MetricError(f"SSIM needs a 2-D image, got shape {p.shape}", "SSIM")
    half = SSIM_WINDOW // 2
    centres = np.zeros_like(m)
    centres[half:-half, half:-half] = m[half:-half, half:-half]
    if not centres.any():
        raise MetricError("No in-mask pixel has a full SSIM window", "SSIM")
    return float(np.mean(ssim_map(p, t, data_range)[centres]))


def normalized_pd_magnitude(pd: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """|PD| divided by its in-mask maximum (zeros stay zero)."""
    mag = np.where(mask, np.abs(pd), 0.0)
    peak = float(mag.max()) if mag.size else 0.0
    return mag / peak if peak > 0 else mag


def map_images(q: QMaps, mask: np.ndarray) -> dict[str, np.ndarray]:
    return {"T1": q.t1_s, "T2": q.t2_s, "PD": normalized_pd_magnitude(q.pd, mask)}


def qmap_metrics(pred: QMaps, truth: QMaps, mask: np.ndarray | None = None) -> dict[str, dict[str, float]]:
    """All four metrics for T1, T2 and PD of one slice."""
    mask = truth.head_mask if mask is None else np.asarray(mask, dtype=bool)
    p_img, t_img = map_images(pred, mask), map_images(truth, mask)
    out: dict[str, dict[str, float]] = {}
    for name in MAPS:
        rng = DATA_RANGES[name]
        p, t = p_img[name], t_img[name]
        out[name] = {
            "MAE": mae(p, t, mask),
            "MAPE": mape(p, t, mask),
            "PSNR": psnr(p, t, mask, rng),
            "SSIM": ssim(p, t, mask, rng),
        }
    return out


def tsmi_psnr(pred: Tsmi, truth: Tsmi, mask: np.ndarray) -> float:
    """PSNR over all coefficient images, data range = arithmetic range of the reference magnitude."""
    mask = np.asarray(mask, dtype=bool)
    mag = np.abs(truth.data)[mask.ravel()]
    rng = float(mag.max() - mag.min()) if mag.size else 0.0
    p = np.moveaxis(pred.data.reshape(*pred.grid, pred.t), -1, 0)
    t = np.moveaxis(truth.data.reshape(*truth.grid, truth.t), -1, 0)
    return psnr(p, t, mask, rng or 1.0)


def tsmi_ssim(pred: Tsmi, truth: Tsmi, mask: np.ndarray) -> float:
    """Mean SSIM of coefficient-image magnitudes with the reference magnitude range."""
    mask = np.asarray(mask, dtype=bool)
    mag = np.abs(truth.data)[mask.ravel()]
    rng = float(mag.max() - mag.min()) if mag.size else 0.0
    return float(np.mean([
        ssim(np.abs(pred.image(k)), np.abs(truth.image(k)), mask, rng or 1.0)
        for k in range(truth.t)
    ]))


@dataclass
class MetricReport:
    """Metrics of one method averaged over test slices, with the per-slice breakdown."""

    method: str
    values: dict[str, dict[str, float]]
    per_slice: list[dict[str, dict[str, float]]] = field(default_factory=list)
    tsmi: dict[str, float] | None = None
    config_hash: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    def get(self, map_name: str, metric: str) -> float:
        return self.values[map_name][metric]

    def averaged(self, metric: str) -> float:
        """Metric averaged over the three maps, as used for alpha selection."""
        return float(np.mean([self.values[m][metric] for m in MAPS]))

    def row(self) -> dict[str, float | str]:
        """Flat CSV row: method plus one column per metric x map."""
        row: dict[str, float | str] = {"method": self.method}
        for metric in METRICS:
            for name in MAPS:
                row[f"{metric}_{name}"] = self.values[name][metric]
        if self.tsmi:
            row.update({f"TSMI_{k}": v for k, v in self.tsmi.items()})
        return row

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "values": self.values,
            "per_slice": self.per_slice,
            "tsmi": self.tsmi,
            "config_hash": self.config_hash,
            **self.extra,
        }


def _average(per_slice: list[dict[str, dict[str, float]]]) -> dict[str, dict[str, float]]:
    return {
        name: {metric: float(np.mean([s[name][metric] for s in per_slice])) for metric in METRICS}
        for name in MAPS
    }


def evaluate_qmaps(
    method: str,
    preds: list[QMaps],
    truths: list[QMaps],
    pred_tsmi: list[Tsmi] | None = None,
    truth_tsmi: list[Tsmi] | None = None,
    config_hash: str = "",
    workers: int = 1,
) -> MetricReport:
    """
    Score a method on a list of slices.

    Metrics are computed per slice inside each truth's head mask, then
    averaged. TSMI metrics are added when both TSMI lists are given.

    Raises:
        MetricError: Empty or mismatched slice lists
    """
    if not truths or len(preds) != len(truths):
        raise MetricError(f"Need matching non-empty slice lists, got {len(preds)} predictions and {len(truths)} truths")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_slice = list(pool.map(qmap_metrics, preds, truths))

    tsmi = None
    if pred_tsmi is not None and truth_tsmi is not None:
        tsmi = {
            "PSNR": float(np.mean([tsmi_psnr(p, t, q.head_mask) for p, t, q in zip(pred_tsmi, truth_tsmi, truths, strict=True)])),
            "SSIM": float(np.mean([tsmi_ssim(p, t, q.head_mask) for p, t, q in zip(pred_tsmi, truth_tsmi, truths, strict=True)])),
        }
    report = MetricReport(method, _average(per_slice), per_slice, tsmi, config_hash)
    logger.info(
        "%s: MAPE T1 %.2f%%, T2 %.2f%%, PD %.2f%%",
        method, report.get("T1", "MAPE"), report.get("T2", "MAPE"), report.get("PD", "MAPE"),
    )
    return report

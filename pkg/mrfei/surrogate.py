"""
Per-voxel Bloch response surrogate.

A 1x1-convolution network maps (T1, T2) to the t compressed fingerprint
coefficients of unit proton density. Proton density is applied outside the
network as a complex multiplication, so the surrogate is exactly linear in PD.

Inputs are clamped into the dictionary's (T1, T2) box (gradient passed straight
through), log-transformed and mapped affinely to [-1, 1]. Outputs are learned
in units of the dictionary's RMS coefficient, stored as ``output_scale``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np

from mrfei.nn import CheckpointError, ParameterSet, he_normal
from mrfei.optim import Adam, MultiStepSchedule
from mrfei.sequence import DEFAULT_N_STATES, Dictionary, SequenceSchedule, epg_fisp_batch
from mrfei.subspace import TemporalBasis, compress
from mrfei.tensor import (
    DiffTensor,
    NumericalError,
    ShapeError,
    add,
    clip,
    concat_channels,
    conv2d,
    log,
    mse_loss,
    mul_channelwise,
    relu,
    scale,
    slice_channels,
    sub,
)
from mrfei.utils import load_bundle

logger = logging.getLogger(__name__)

HIDDEN_UNITS = 300
DEFAULT_EPOCHS = 2000
DEFAULT_LR = 1e-3
LR_DROP_FRACTIONS = (0.6, 0.85)
HELD_OUT_PROBES = 200
FIT_TARGET = 0.02


class SurrogateError(ValueError):
    """Exception raised for unusable training dictionaries or incompatible checkpoints."""

    def __init__(self, message: str, path: Path | None = None):
        self.message = message
        self.path = path
        super().__init__(self.message)


class BlochSurrogate:
    """2 -> hidden -> hidden -> 2t voxel-wise network with ReLU hidden layers and a linear output."""

    def __init__(
        self,
        t: int,
        t1_range: tuple[float, float],
        t2_range: tuple[float, float],
        hidden: int = HIDDEN_UNITS,
        output_scale: float = 1.0,
        basis_digest: str | None = None,
        seed: int = 0,
    ):
        self.t = t
        self.hidden = hidden
        self.t1_range = (float(t1_range[0]), float(t1_range[1]))
        self.t2_range = (float(t2_range[0]), float(t2_range[1]))
        self.output_scale = float(output_scale)
        self.basis_digest = basis_digest
        self.fit_report: dict[str, float] = {}
        self.params = ParameterSet()

        rng = np.random.default_rng(seed)
        self.params.add("layer1.weight", he_normal(rng, (hidden, 2, 1, 1)))
        self.params.add("layer1.bias", np.zeros(hidden))
        self.params.add("layer2.weight", he_normal(rng, (hidden, hidden, 1, 1)))
        self.params.add("layer2.bias", np.zeros(hidden))
        self.params.add("layer3.weight", rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(2 * t, hidden, 1, 1)))
        self.params.add("layer3.bias", np.zeros(2 * t))

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def freeze(self) -> None:
        """Stop parameter gradients; inputs still receive gradients through the network."""
        self.params.set_trainable(False)

    def unfreeze(self) -> None:
        self.params.set_trainable(True)

    def _normalize(self, x: DiffTensor, bounds: tuple[float, float]) -> DiffTensor:
        lo, hi = bounds
        span = math.log(hi / lo) or 1.0
        logged = log(clip(x, lo, hi, straight_through=True))
        return scale(logged, 2.0 / span, -1.0 - 2.0 * math.log(lo) / span)

    def response(self, t1t2: DiffTensor) -> DiffTensor:
        """Unit-PD compressed fingerprint channels (N, 2t, H, W) for (T1, T2) channels (N, 2, H, W)."""
        if t1t2.ndim != 4 or t1t2.shape[1] != 2:
            raise ShapeError("BlochSurrogate", "expected (N, 2, H, W) relaxation channels", dim="C", expected=2, got=t1t2.shape)
        z = concat_channels([
            self._normalize(slice_channels(t1t2, 0, 1), self.t1_range),
            self._normalize(slice_channels(t1t2, 1, 2), self.t2_range),
        ])
        h = relu(conv2d(z, self.params["layer1.weight"], self.params["layer1.bias"]))
        h = relu(conv2d(h, self.params["layer2.weight"], self.params["layer2.bias"]))
        out = conv2d(h, self.params["layer3.weight"], self.params["layer3.bias"])
        return scale(out, self.output_scale)

    def __call__(self, q: DiffTensor) -> DiffTensor:
        return apply_surrogate(self, q)

    def evaluate(self, t1_s: np.ndarray, t2_s: np.ndarray) -> np.ndarray:
        """Complex (B, t) coefficients for unit PD, without building a gradient graph."""
        t1 = np.atleast_1d(np.asarray(t1_s, dtype=np.float64))
        t2 = np.atleast_1d(np.asarray(t2_s, dtype=np.float64))
        inp = DiffTensor(np.stack([t1, t2], axis=1)[:, :, None, None])
        out = self.response(inp).values[:, :, 0, 0]
        return out[:, : self.t] + 1j * out[:, self.t :]

    def describe(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "hidden": self.hidden,
            "t1_range": list(self.t1_range),
            "t2_range": list(self.t2_range),
            "output_scale": self.output_scale,
            "basis_digest": self.basis_digest,
            "parameters": self.params.count,
            "fit": self.fit_report,
        }

    def digest(self) -> str:
        return self.params.digest()

    def save(self, stem: Path) -> Path:
        return self.params.save(stem, {"kind": "surrogate", "surrogate": self.describe()})

    @classmethod
    def load(cls, stem: Path, basis: TemporalBasis | None = None) -> BlochSurrogate:
        """
        Load a checkpoint written by :meth:`save`.

        Raises:
            SurrogateError: Not a surrogate checkpoint, or trained for another basis
        """
        _, manifest = load_bundle(stem)
        info = manifest.get("surrogate")
        if manifest.get("kind") != "surrogate" or not info:
            raise SurrogateError(f"{stem} is not a surrogate checkpoint", Path(stem))
        if basis is not None and info.get("basis_digest") != basis.digest():
            raise SurrogateError("Surrogate was trained for a different basis", Path(stem))
        model = cls(
            info["t"],
            tuple(info["t1_range"]),
            tuple(info["t2_range"]),
            hidden=info["hidden"],
            output_scale=info["output_scale"],
            basis_digest=info.get("basis_digest"),
        )
        try:
            model.params.load(stem)
        except CheckpointError as e:
            raise SurrogateError(e.message, Path(stem)) from e
        model.fit_report = dict(info.get("fit", {}))
        return model


def apply_surrogate(b: BlochSurrogate, q: DiffTensor) -> DiffTensor:
    """
    TSMI channels from QMap channels.

    Args:
        b: Surrogate
        q: (N, 4, H, W) channels T1, T2, PD_re, PD_im

    Returns:
        (N, 2t, H, W): real parts of PD * u, then imaginary parts
    """
    if q.ndim != 4 or q.shape[1] != 4:
        raise ShapeError("apply_surrogate", "expected (N, 4, H, W) QMap channels", dim="C", expected=4, got=q.shape)
    u = b.response(slice_channels(q, 0, 2))
    u_re, u_im = slice_channels(u, 0, b.t), slice_channels(u, b.t, 2 * b.t)
    pd_re, pd_im = slice_channels(q, 2, 3), slice_channels(q, 3, 4)
    x_re = sub(mul_channelwise(u_re, pd_re), mul_channelwise(u_im, pd_im))
    x_im = add(mul_channelwise(u_im, pd_re), mul_channelwise(u_re, pd_im))
    return concat_channels([x_re, x_im])


def train_surrogate(
    dictionary: Dictionary,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
    hidden: int = HIDDEN_UNITS,
    seed: int = 0,
    progress: Callable[[int, int, float], None] | None = None,
) -> BlochSurrogate:
    """
    Fit the surrogate to a compressed dictionary with full-batch Adam.

    The learning rate drops by 10x at 60% and 85% of the epochs. The returned
    surrogate is frozen; ``fit_report`` holds the final loss and the relative
    RMS error over the training atoms.

    Raises:
        SurrogateError: Dictionary not compressed
        NumericalError: Loss became NaN or inf (reports the epoch)
    """
    if not dictionary.is_compressed:
        raise SurrogateError("Surrogate training needs a compressed dictionary")
    grid = dictionary.grid
    targets = dictionary.atoms
    t = targets.shape[1]
    output_scale = float(np.sqrt(np.mean(targets.real**2 + targets.imag**2) / 2)) or 1.0

    model = BlochSurrogate(
        t,
        (float(grid[:, 0].min()), float(grid[:, 0].max())),
        (float(grid[:, 1].min()), float(grid[:, 1].max())),
        hidden=hidden,
        output_scale=output_scale,
        basis_digest=dictionary.basis_digest,
        seed=seed,
    )
    inp = DiffTensor(grid[:, :, None, None])
    target = DiffTensor(np.concatenate([targets.real, targets.imag], axis=1)[:, :, None, None] / output_scale)
    unit = 1.0 / output_scale

    optimizer = Adam(model.params, lr=lr)
    schedule = MultiStepSchedule(lr, tuple(int(f * epochs) for f in LR_DROP_FRACTIONS))
    loss_value = float("nan")
    for epoch in range(epochs):
        optimizer.zero_grad()
        loss = mse_loss(scale(model.response(inp), unit), target)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericalError(
                f"surrogate loss diverged at epoch {epoch} (lr {schedule.lr_at(epoch):g})",
                epoch=epoch,
                value=loss_value,
            )
        loss.backward()
        optimizer.step(schedule.lr_at(epoch))
        if progress:
            progress(epoch + 1, epochs, loss_value)

    pred = model.evaluate(grid[:, 0], grid[:, 1])
    rel_rms = float(np.linalg.norm(pred - targets) / np.linalg.norm(targets))
    model.fit_report = {"final_loss": loss_value, "relative_rms": rel_rms, "epochs": float(epochs)}
    model.freeze()
    logger.info("Surrogate fit: %d atoms, relative RMS %.4f", dictionary.size, rel_rms)
    return model


def relative_rms_error(model: BlochSurrogate, t1_s: np.ndarray, t2_s: np.ndarray, reference: np.ndarray) -> float:
    """||B(T1, T2) - reference|| / ||reference|| over a probe set."""
    pred = model.evaluate(t1_s, t2_s)
    return float(np.linalg.norm(pred - reference) / np.linalg.norm(reference))


def sample_probe_pairs(
    t1_range: tuple[float, float],
    t2_range: tuple[float, float],
    n: int = HELD_OUT_PROBES,
    seed: int = 0,
    t2_below_t1: bool = False,
) -> np.ndarray:
    """
    Log-uniform (T1, T2) pairs inside a value box, as an (n, 2) array.

    With ``t2_below_t1`` only pairs with T2 <= T1 are kept, matching a
    filtered grid.
    """
    rng = np.random.default_rng(seed)
    log_lo = np.log([t1_range[0], t2_range[0]])
    log_hi = np.log([t1_range[1], t2_range[1]])
    kept: list[np.ndarray] = []
    count = 0
    while count < n:
        draw = np.exp(rng.uniform(log_lo, log_hi, size=(2 * n, 2)))
        if t2_below_t1:
            draw = draw[draw[:, 1] <= draw[:, 0]]
        kept.append(draw)
        count += draw.shape[0]
    return np.concatenate(kept)[:n]


def held_out_error(
    model: BlochSurrogate,
    schedule: SequenceSchedule,
    basis: TemporalBasis,
    n: int = HELD_OUT_PROBES,
    seed: int = 0,
    n_states: int = DEFAULT_N_STATES,
    t2_below_t1: bool = False,
) -> float:
    """
    Relative RMS error on fresh (T1, T2) pairs that are not dictionary atoms.

    The pairs are simulated with EPG and compressed with ``basis``, then
    compared with the surrogate. The result is also stored in
    ``fit_report["held_out_relative_rms"]``.

    Raises:
        SurrogateError: Basis does not match the surrogate
    """
    if basis.t != model.t or (model.basis_digest is not None and basis.digest() != model.basis_digest):
        raise SurrogateError(f"Basis (t={basis.t}) was not the one the surrogate was fitted to")
    pairs = sample_probe_pairs(model.t1_range, model.t2_range, n, seed, t2_below_t1)
    reference = compress(epg_fisp_batch(pairs[:, 0], pairs[:, 1], schedule, n_states), basis)
    err = relative_rms_error(model, pairs[:, 0], pairs[:, 1], reference)
    model.fit_report["held_out_relative_rms"] = err
    if err > FIT_TARGET:
        logger.warning("Surrogate held-out relative RMS %.4f exceeds %.2f", err, FIT_TARGET)
    else:
        logger.info("Surrogate held-out relative RMS %.4f over %d pairs", err, n)
    return err

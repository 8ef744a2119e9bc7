"""
Reconstruction network training: NLEI, linear EI and supervised.

Provides:
- TrainConfig / TrainMode and the per-epoch loss history
- ForwardModel: the acquisition operator (plus the frozen Bloch surrogate in
  NLEI mode) in real-channel form, with the dataset normalisation constant
- loss_mc, loss_ei and the supervised loss
- Trainer, which runs the epochs and writes a run directory
- reconstruct, ei_to_qmaps and the equivariance gap diagnostic

Network outputs are multiplied by the head mask before entering any loss.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from mrfei.acquisition import AcquisitionOperator, channels_to_tsmi, complex_to_pairs, tsmi_to_channels
from mrfei.matching import MatchResult, dictionary_match
from mrfei.nn import OutputMode, ReconNetwork
from mrfei.optim import Adam, StepSchedule
from mrfei.phantom import KSpaceData, MrfDataset, QMaps, Tsmi
from mrfei.sequence import T1_DOMAIN, T2_DOMAIN, Dictionary
from mrfei.surrogate import BlochSurrogate, apply_surrogate
from mrfei.tensor import (
    DiffTensor,
    NumericalError,
    ShapeError,
    add,
    apply_linear,
    concat,
    mse_loss,
    mul_channelwise,
    scale,
    slice_batch,
)
from mrfei.transforms import apply_transform, sample_transforms, transform_tensor
from mrfei.utils import save_json_file

logger = logging.getLogger(__name__)

QMAP_HEAD_BIAS = (1.0, 0.1, 0.5, 0.0)

Network = Callable[[DiffTensor], DiffTensor]


class TrainingError(Exception):
    """Exception raised for inconsistent training setups."""

    def __init__(self, message: str, mode: str | None = None):
        self.message = message
        self.mode = mode
        super().__init__(self.message)


class TrainMode(Enum):
    NLEI = "nlei"
    EI = "ei"
    SUPERVISED = "supervised"

    @property
    def output_mode(self) -> OutputMode:
        return OutputMode.TSMI if self is TrainMode.EI else OutputMode.QMAP


@dataclass(frozen=True)
class TrainConfig:
    """
    Training hyperparameters.

    Defaults follow the full-scale setting: 1000 epochs, batch 2, Adam with
    lr 5e-4 dropped 10x at epoch 300, weight decay 1e-8, three transforms per
    iteration.
    """

    mode: TrainMode = TrainMode.NLEI
    alpha: float = 0.0
    epochs: int = 1000
    batch_size: int = 2
    lr: float = 5e-4
    lr_drop_epoch: int | None = 300
    lr_drop_factor: float = 10.0
    weight_decay: float = 1e-8
    n_transforms_per_iter: int = 3
    seed: int = 0
    use_ei: bool = True
    stop_grad: bool = False
    per_item_transforms: bool = False
    debug_transforms: tuple[int, ...] | None = None
    depth: int = 2
    base_channels: int = 16
    zero_head: bool = False
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.mode, str):
            object.__setattr__(self, "mode", TrainMode(self.mode))
        if self.debug_transforms is not None:
            object.__setattr__(self, "debug_transforms", tuple(self.debug_transforms))
        if self.alpha < 0:
            raise TrainingError(f"alpha must be >= 0, got {self.alpha}", self.mode.value)
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be positive", self.mode.value)

    @property
    def ei_active(self) -> bool:
        return self.mode is not TrainMode.SUPERVISED and self.use_ei and self.alpha > 0

    def schedule(self) -> StepSchedule:
        return StepSchedule(self.lr, self.lr_drop_epoch, self.lr_drop_factor)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        data["debug_transforms"] = list(self.debug_transforms) if self.debug_transforms is not None else None
        return data


@dataclass
class EpochRecord:
    epoch: int
    loss_mc: float
    loss_ei: float
    total: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def totals(self) -> list[float]:
        return [r.total for r in self.records]

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "L_MC", "L_EI", "total"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.loss_mc), repr(r.loss_ei), repr(r.total)])


class ForwardModel:
    """
    Measurement model in real-channel form.

    With a surrogate, inputs are QMap channels (N, 4, H, W) and the model is
    A o B; without one, inputs are TSMI channels (N, 2t, H, W) and the model is A.
    """

    def __init__(self, op: AcquisitionOperator, surrogate: BlochSurrogate | None = None, norm: float = 1.0):
        if surrogate is not None and surrogate.t != op.t:
            raise ShapeError("ForwardModel", "surrogate and basis dimension", dim="t", expected=op.t, got=surrogate.t)
        if norm <= 0 or not math.isfinite(norm):
            raise TrainingError(f"Normalisation constant must be positive and finite, got {norm}")
        self.op = op
        self.surrogate = surrogate
        self.norm = norm
        self.a_node = op.as_linear_node()
        self.ah_node = self.a_node.adjoint()

    @property
    def output_mode(self) -> OutputMode:
        return OutputMode.TSMI if self.surrogate is None else OutputMode.QMAP

    def measure(self, z: DiffTensor) -> DiffTensor:
        """(N, 2, m, T) k-space pairs of QMap or TSMI channels."""
        x = apply_surrogate(self.surrogate, z) if self.surrogate is not None else z
        return apply_linear(self.a_node, x)

    def network_input(self, y_pairs: DiffTensor) -> DiffTensor:
        """Normalised backprojection A^H y / norm as (N, 2t, H, W) channels."""
        return scale(apply_linear(self.ah_node, y_pairs), 1.0 / self.norm)

    def predict(self, f: Network, inp: DiffTensor, head_mask: np.ndarray) -> DiffTensor:
        """Masked network output; TSMI outputs are returned in data units."""
        out = f(inp)
        if self.output_mode is OutputMode.TSMI:
            out = scale(out, self.norm)
        return mul_channelwise(out, DiffTensor(_mask_channel(head_mask)))


def _mask_channel(head_mask: np.ndarray) -> np.ndarray:
    """(N, H, W) or (H, W) boolean -> (N, 1, H, W) float."""
    m = np.asarray(head_mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    return m[:, None]


def backprojection_input(op: AcquisitionOperator, samples: np.ndarray, norm: float) -> np.ndarray:
    """(N, m, T) k-space -> (N, 2t, H, W) normalised network input."""
    return tsmi_to_channels(op.backproject(samples), op.H, op.W) / norm


def normalization_constant(op: AcquisitionOperator, kspace: Sequence[KSpaceData], head_masks: Sequence[np.ndarray]) -> float:
    """Median in-mask magnitude of the first backprojected subspace coefficient."""
    values = []
    for y, mask in zip(kspace, head_masks, strict=True):
        coeff0 = op.backproject(y.samples)[:, 0].reshape(op.H, op.W)
        values.append(np.abs(coeff0[np.asarray(mask, dtype=bool)]))
    pooled = np.concatenate(values) if values else np.zeros(0)
    norm = float(np.median(pooled)) if pooled.size else 0.0
    return norm if norm > 0 else 1.0


def loss_mc(q: DiffTensor, y_pairs: DiffTensor, model: ForwardModel) -> DiffTensor:
    """MSE between re-simulated and measured k-space over real and imaginary parts of all samples."""
    return mse_loss(model.measure(q), y_pairs)


def loss_ei(
    f: Network,
    q: DiffTensor,
    model: ForwardModel,
    transform_ids: Sequence[int] | Sequence[Sequence[int]],
    head_mask: np.ndarray,
    stop_grad: bool = False,
) -> DiffTensor:
    """
    Equivariance loss for one batch.

    Each transform id is applied to the whole batch (a flat id list) or each
    item gets its own ids (a list of per-item lists). Transformed items are
    stacked along the batch axis, pushed through the measurement model and
    the network, and compared with the transformed reconstructions.

    Args:
        f: Reconstruction network
        q: (N, C, H, W) masked reconstructions
        model: Forward model (A o B for QMaps, A for TSMIs)
        transform_ids: Ids per iteration, or per item
        head_mask: (N, H, W) masks of the untransformed items
        stop_grad: Detach ``q`` before transforming it
    """
    src = q.detach() if stop_grad else q
    masks = np.asarray(head_mask, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    pieces: list[DiffTensor] = []
    piece_masks: list[np.ndarray] = []
    if transform_ids and isinstance(transform_ids[0], (list, tuple)):
        per_item = [list(ids) for ids in transform_ids]  # type: ignore[arg-type]
        if len(per_item) != q.shape[0]:
            raise ShapeError("loss_ei", "one id list per item", dim="N", expected=q.shape[0], got=len(per_item))
        for j in range(len(per_item[0])):
            for b, ids in enumerate(per_item):
                pieces.append(transform_tensor(slice_batch(src, b, b + 1), ids[j]))
                piece_masks.append(apply_transform(ids[j], masks[b : b + 1]))
    else:
        for k in transform_ids:
            pieces.append(transform_tensor(src, int(k)))  # type: ignore[arg-type]
            piece_masks.append(apply_transform(int(k), masks))  # type: ignore[arg-type]

    q_t = concat(pieces, axis=0)
    mask_t = np.concatenate(piece_masks, axis=0)
    q_ei = model.predict(f, model.network_input(model.measure(q_t)), mask_t)
    return mse_loss(q_ei, q_t)


def loss_supervised(q: DiffTensor, target: np.ndarray, head_mask: np.ndarray) -> DiffTensor:
    """Head-masked MSE against ground-truth channels; out-of-mask targets never enter the value."""
    mask = np.broadcast_to(_mask_channel(head_mask) > 0, q.shape)
    return mse_loss(q, DiffTensor(target), mask=mask)


@dataclass
class TrainResult:
    """Trained network, its loss history and everything needed to run it."""

    network: ReconNetwork
    history: TrainHistory
    norm: float
    config: TrainConfig
    manifest: dict[str, Any] = field(default_factory=dict)


class Trainer:
    """
    Epoch loop for one training mode.

    Features:
    - Shuffled mini-batches and transform draws from separate seeded streams
    - Step learning-rate schedule with classic L2 weight decay
    - Frozen-surrogate check (parameter digest before and after)
    - Optional run directory: config.json, loss.csv, checkpoints, manifest.json
    """

    def __init__(
        self,
        config: TrainConfig,
        dataset: MrfDataset,
        op: AcquisitionOperator | None = None,
        surrogate: BlochSurrogate | None = None,
        network: ReconNetwork | None = None,
        run_dir: Path | None = None,
        progress: Callable[[int, int, float], None] | None = None,
    ):
        """
        Initialize trainer.

        Args:
            config: Hyperparameters and mode
            dataset: Train split is used; ground truth only in supervised mode
            op: Acquisition operator (defaults to the dataset's)
            surrogate: Frozen Bloch surrogate, required in NLEI mode
            network: Network to train (built from the config if omitted)
            run_dir: Where to write run artifacts
            progress: Optional callback (epoch, epochs, total loss)
        """
        self.config = config
        self.dataset = dataset
        self.op = op or dataset.operator()
        self.run_dir = run_dir
        self.progress = progress
        mode = config.mode

        if mode is TrainMode.NLEI and surrogate is None:
            raise TrainingError("NLEI training needs a Bloch surrogate", mode.value)
        if mode is TrainMode.SUPERVISED and not all(s.has_ground_truth for s in dataset.train):
            raise TrainingError("Supervised training needs ground truth in the train split", mode.value)
        self.surrogate = surrogate if mode is TrainMode.NLEI else None
        if self.surrogate is not None:
            self.surrogate.freeze()

        items = list(dataset.self_supervised("train"))
        self.norm = normalization_constant(self.op, [it.kspace for it in items], [it.head_mask for it in items])
        self.model = ForwardModel(self.op, self.surrogate, self.norm)
        self.inputs = backprojection_input(self.op, np.stack([it.kspace.samples for it in items]), self.norm)
        self.y_pairs = complex_to_pairs(np.stack([it.kspace.samples for it in items]))
        self.masks = np.stack([it.head_mask for it in items])
        self.targets = (
            np.stack([s.qmaps.masked().to_channels() for s in dataset.train if s.qmaps is not None])
            if mode is TrainMode.SUPERVISED
            else None
        )

        out_channels = 2 * self.op.t if mode is TrainMode.EI else 4
        if network is None:
            network = ReconNetwork(
                2 * self.op.t,
                out_channels,
                mode.output_mode,
                depth=config.depth,
                base_channels=config.base_channels,
                seed=config.seed,
                zero_head=config.zero_head,
                head_bias=QMAP_HEAD_BIAS if mode.output_mode is OutputMode.QMAP else None,
            )
        if network.mode is not mode.output_mode or network.out_channels != out_channels:
            raise TrainingError(f"Network mode {network.mode.value} does not fit {mode.value} training", mode.value)
        self.network = network

        shuffle_seq, transform_seq = np.random.SeedSequence(config.seed).spawn(2)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.transform_rng = np.random.default_rng(transform_seq)

    def _draw_transforms(self, batch: int) -> list[int] | list[list[int]]:
        cfg = self.config
        if cfg.debug_transforms is not None:
            return list(cfg.debug_transforms)
        if cfg.per_item_transforms:
            return [sample_transforms(self.transform_rng, cfg.n_transforms_per_iter) for _ in range(batch)]
        return sample_transforms(self.transform_rng, cfg.n_transforms_per_iter)

    def step_losses(self, idx: np.ndarray) -> tuple[DiffTensor, DiffTensor | None, DiffTensor]:
        """Losses for one batch of train items; returns (L_main, L_EI or None, total)."""
        cfg = self.config
        inp = DiffTensor(self.inputs[idx])
        masks = self.masks[idx]
        q = self.model.predict(self.network, inp, masks)

        if cfg.mode is TrainMode.SUPERVISED:
            assert self.targets is not None
            main = loss_supervised(q, self.targets[idx], masks)
            return main, None, main

        main = loss_mc(q, DiffTensor(self.y_pairs[idx]), self.model)
        if not cfg.ei_active:
            return main, None, main
        ei = loss_ei(self.network, q, self.model, self._draw_transforms(len(idx)), masks, cfg.stop_grad)
        return main, ei, add(main, scale(ei, cfg.alpha))

    def fit(self) -> TrainResult:
        cfg = self.config
        surrogate_digest = self.surrogate.digest() if self.surrogate is not None else None
        optimizer = Adam(self.network.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        schedule = cfg.schedule()
        history = TrainHistory()
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            save_json_file(self.run_dir / "config.json", {"train": cfg.to_dict(), "norm": self.norm})

        n_items = self.inputs.shape[0]
        for epoch in range(cfg.epochs):
            order = self.shuffle_rng.permutation(n_items)
            sums = np.zeros(3)
            n_batches = 0
            for start in range(0, n_items, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                optimizer.zero_grad()
                main, ei, total = self.step_losses(idx)
                total_value = total.item()
                if not math.isfinite(total_value):
                    raise NumericalError(f"training loss is {total_value} at epoch {epoch}", epoch=epoch, value=total_value)
                total.backward()
                try:
                    optimizer.step(schedule.lr_at(epoch))
                except NumericalError as e:
                    e.epoch = epoch
                    raise
                sums += (main.item(), ei.item() if ei is not None else 0.0, total_value)
                n_batches += 1
            mc, ei_mean, tot = (sums / n_batches).tolist()
            history.append(EpochRecord(epoch, mc, ei_mean, tot))
            logger.debug("epoch %d: L=%.6g (main %.6g, EI %.6g)", epoch, tot, mc, ei_mean)
            if self.progress:
                self.progress(epoch + 1, cfg.epochs, tot)
            if self.run_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                self.network.save(self.run_dir / "checkpoints" / f"epoch_{epoch + 1:05d}", {"norm": self.norm})

        if self.surrogate is not None and self.surrogate.digest() != surrogate_digest:
            raise TrainingError("Frozen surrogate parameters changed during training", cfg.mode.value)

        manifest = {
            "mode": cfg.mode.value,
            "norm": self.norm,
            "epochs": cfg.epochs,
            "final_loss": history.records[-1].total,
            "dataset_digest": self.dataset.digest(),
            "basis_digest": self.op.basis.digest(),
            "mask_digest": self.op.mask.digest(),
            "surrogate_digest": surrogate_digest,
            "network_digest": self.network.params.digest(),
            "network": self.network.describe(),
        }
        if self.run_dir is not None:
            history.write_csv(self.run_dir / "loss.csv")
            self.network.save(self.run_dir / "model", {"norm": self.norm, "train": cfg.to_dict()})
            save_json_file(self.run_dir / "manifest.json", manifest)
        logger.info(
            "Trained %s network for %d epochs: loss %.4g -> %.4g",
            cfg.mode.value, cfg.epochs, history.records[0].total, history.records[-1].total,
        )
        return TrainResult(self.network, history, self.norm, cfg, manifest)


def train(
    mode: TrainMode | str,
    dataset: MrfDataset,
    cfg: TrainConfig,
    surrogate: BlochSurrogate | None = None,
    op: AcquisitionOperator | None = None,
    **kwargs: Any,
) -> TrainResult:
    """Train a reconstruction network; ``mode`` overrides ``cfg.mode``."""
    mode = TrainMode(mode) if isinstance(mode, str) else mode
    if cfg.mode is not mode:
        cfg = TrainConfig(**{**cfg.to_dict(), "mode": mode})
    return Trainer(cfg, dataset, op, surrogate, **kwargs).fit()


def reconstruct(
    f: ReconNetwork,
    y: KSpaceData,
    op: AcquisitionOperator,
    norm: float = 1.0,
    head_mask: np.ndarray | None = None,
) -> QMaps | Tsmi:
    """
    Run a trained network on one slice of k-space.

    QMap outputs are clamped to the dictionary domain where the head mask is
    set and the predicted PD is non-zero; other voxels get zero maps.
    TSMI outputs are returned in data units.
    """
    if y.samples.shape != (op.m, op.T):
        raise ShapeError("reconstruct", "k-space shape", dim="(m, T)", expected=(op.m, op.T), got=y.samples.shape)
    if f.in_channels != 2 * op.t:
        raise ShapeError("reconstruct", "network input channels", dim="C", expected=2 * op.t, got=f.in_channels)
    mask = np.ones((op.H, op.W), dtype=bool) if head_mask is None else np.asarray(head_mask, dtype=bool)
    inp = DiffTensor(backprojection_input(op, y.samples[None], norm))
    out = f(inp).values[0]

    if f.mode is OutputMode.TSMI:
        x = channels_to_tsmi((out * norm * mask)[None])[0]
        return Tsmi(x, (op.H, op.W))

    pd = np.where(mask, out[2] + 1j * out[3], 0.0)
    tissue = mask & (np.abs(pd) > 0)
    t1 = np.where(tissue, np.clip(out[0], *T1_DOMAIN), 0.0)
    t2 = np.where(tissue, np.clip(out[1], *T2_DOMAIN), 0.0)
    return QMaps(t1, t2, pd.real.copy(), pd.imag.copy(), mask)


def ei_to_qmaps(
    f_ei: ReconNetwork,
    y: KSpaceData,
    op: AcquisitionOperator,
    dictionary: Dictionary,
    head_mask: np.ndarray,
    norm: float = 1.0,
) -> MatchResult:
    """Reconstruct a TSMI with a linear-EI network, then dictionary-match it."""
    if f_ei.mode is not OutputMode.TSMI:
        raise TrainingError("ei_to_qmaps needs a TSMI-output network", f_ei.mode.value)
    x = reconstruct(f_ei, y, op, norm, head_mask)
    assert isinstance(x, Tsmi)
    return dictionary_match(x, dictionary, head_mask, basis=op.basis)


def equivariance_gap(
    f: ReconNetwork,
    model: ForwardModel,
    kspace: Sequence[KSpaceData],
    head_masks: Sequence[np.ndarray],
    transform_ids: Sequence[int] = (1, 2, 3, 4, 5, 6, 7),
) -> float:
    """
    Mean over slices and transforms of MSE(T(f(y)), f(A B T(f(y)))).

    A diagnostic of how equivariant the trained system is; lower is better.
    """
    gaps = []
    for y, mask in zip(kspace, head_masks, strict=True):
        inp = DiffTensor(backprojection_input(model.op, y.samples[None], model.norm))
        q = model.predict(f, inp, mask[None]).detach()
        for k in transform_ids:
            q_t = transform_tensor(q, k)
            mask_t = apply_transform(k, mask[None])
            q_ei = model.predict(f, model.network_input(model.measure(q_t)), mask_t)
            gaps.append(mse_loss(q_ei, q_t).item())
    return float(np.mean(gaps)) if gaps else 0.0


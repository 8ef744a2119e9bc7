"""
Synthetic brain phantoms and retrospectively simulated MRF datasets.

Provides:
- QMaps, Tsmi and KSpaceData records
- A procedural elliptical head phantom with a synthetic tissue palette
- TSMI synthesis (PD times the compressed EPG fingerprint per voxel)
- k-space simulation through the acquisition operator
- Train/test datasets with an on-disk layout of one directory per slice

No noise is added anywhere.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from mrfei.acquisition import AcquisitionOperator, SamplingMask, load_mask, save_mask
from mrfei.sequence import (
    DEFAULT_N_STATES,
    T1_DOMAIN,
    T2_DOMAIN,
    Dictionary,
    SequenceSchedule,
    epg_fisp_batch,
)
from mrfei.subspace import TemporalBasis, compress
from mrfei.tensor import ShapeError
from mrfei.utils import hash_arrays, load_bundle, load_json_file, save_bundle, save_json_file

logger = logging.getLogger(__name__)

MIN_PHANTOM_SIZE = 16


@dataclass(frozen=True)
class Tissue:
    """Synthetic tissue class (not measured values)."""

    name: str
    t1_s: float
    t2_s: float
    pd: float


WHITE_MATTER = Tissue("white-matter-like", 0.8, 0.07, 0.70)
GRAY_MATTER = Tissue("gray-matter-like", 1.3, 0.11, 0.80)
CSF = Tissue("csf-like", 4.0, 1.8, 1.00)
LESION_T1_RANGE = (0.5, 2.0)
LESION_T2_RANGE = (0.05, 0.4)
PD_RANGE = (0.6, 1.0)


class PhantomError(ValueError):
    """Exception raised for invalid phantoms, TSMI synthesis inputs or dataset files."""

    def __init__(self, message: str, path: Path | None = None):
        self.message = message
        self.path = path
        super().__init__(self.message)


@dataclass
class QMaps:
    """Per-voxel T1, T2 (seconds) and complex proton density, zero outside the head."""

    t1_s: np.ndarray
    t2_s: np.ndarray
    pd_re: np.ndarray
    pd_im: np.ndarray
    head_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.t1_s.shape  # type: ignore[return-value]

    @property
    def pd(self) -> np.ndarray:
        return self.pd_re + 1j * self.pd_im

    def to_channels(self) -> np.ndarray:
        """(4, H, W) stack in network order: T1, T2, PD_re, PD_im."""
        return np.stack([self.t1_s, self.t2_s, self.pd_re, self.pd_im])

    @classmethod
    def from_channels(cls, channels: np.ndarray, head_mask: np.ndarray) -> QMaps:
        channels = np.asarray(channels, dtype=np.float64)
        if channels.ndim != 3 or channels.shape[0] != 4:
            raise ShapeError("QMaps.from_channels", "expected (4, H, W)", dim=0, expected=4, got=channels.shape)
        return cls(*(channels[i].copy() for i in range(4)), head_mask=np.asarray(head_mask, dtype=bool))

    def masked(self) -> QMaps:
        """Copy with every map zeroed outside the head mask."""
        keep = self.head_mask
        return QMaps(*(np.where(keep, a, 0.0) for a in (self.t1_s, self.t2_s, self.pd_re, self.pd_im)), keep.copy())

    def validate(self) -> None:
        """Check the (T1, T2) domain inside the mask and zeros outside it."""
        inside = self.head_mask
        t1, t2 = self.t1_s[inside], self.t2_s[inside]
        if np.any(t1 < T1_DOMAIN[0]) or np.any(t1 > T1_DOMAIN[1]) or np.any(t2 < T2_DOMAIN[0]) or np.any(t2 > T2_DOMAIN[1]):
            raise PhantomError("In-mask (T1, T2) outside the dictionary domain")
        outside = ~inside
        if any(np.any(a[outside] != 0) for a in (self.t1_s, self.t2_s, self.pd_re, self.pd_im)):
            raise PhantomError("Maps are non-zero outside the head mask")

    def digest(self) -> str:
        return hash_arrays(self.t1_s, self.t2_s, self.pd_re, self.pd_im, self.head_mask)


@dataclass
class Tsmi:
    """Time-series of magnetisation images in the subspace: (H*W, t) complex, row-major voxels."""

    data: np.ndarray
    grid: tuple[int, int]

    @property
    def t(self) -> int:
        return self.data.shape[1]

    def image(self, k: int) -> np.ndarray:
        """Coefficient image k as (H, W)."""
        return self.data[:, k].reshape(self.grid)


@dataclass
class KSpaceData:
    """Undersampled measurements (m, T) and the digest of the mask that produced them."""

    samples: np.ndarray
    mask_ref: str


def _ellipse(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def make_brain_phantom(
    H: int,
    W: int,
    seed: int | Sequence[int] = 0,
    smooth: bool = True,
    n_lesions: tuple[int, int] = (1, 3),
) -> QMaps:
    """
    Procedural head slice.

    An elliptical head holds a gray-matter rim around white matter, two
    CSF ventricles, random gray-matter blobs and 1-3 lesions with random
    relaxation times. PD magnitude lies in [0.6, 1] with a smooth linear phase.

    Args:
        H, W: Image size, at least 16 each
        seed: Seed or seed sequence; equal seeds give bit-identical phantoms
        smooth: 3x3 normalised averaging of T1/T2 inside the head
        n_lesions: Inclusive range for the number of lesions
    """
    if H < MIN_PHANTOM_SIZE or W < MIN_PHANTOM_SIZE:
        raise PhantomError(f"Phantom needs H, W >= {MIN_PHANTOM_SIZE}, got {H}x{W}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[-1.0 : 1.0 : H * 1j, -1.0 : 1.0 : W * 1j]

    ry, rx = rng.uniform(0.82, 0.92), rng.uniform(0.68, 0.80)
    tilt = rng.uniform(-0.15, 0.15)
    head = _ellipse(yy, xx, 0.0, 0.0, ry, rx, tilt)
    white = _ellipse(yy, xx, 0.0, 0.0, 0.82 * ry, 0.82 * rx, tilt)

    t1 = np.full((H, W), GRAY_MATTER.t1_s)
    t2 = np.full((H, W), GRAY_MATTER.t2_s)
    pd_mag = np.full((H, W), GRAY_MATTER.pd)

    def paint(region: np.ndarray, tissue: Tissue) -> None:
        t1[region], t2[region], pd_mag[region] = tissue.t1_s, tissue.t2_s, tissue.pd

    paint(white, WHITE_MATTER)
    for _ in range(rng.integers(2, 5)):
        blob = _ellipse(
            yy, xx, rng.uniform(-0.5, 0.5) * ry, rng.uniform(-0.5, 0.5) * rx,
            rng.uniform(0.06, 0.15), rng.uniform(0.06, 0.15), rng.uniform(0, np.pi),
        )
        paint(blob & white, GRAY_MATTER)
    for side in (-1.0, 1.0):
        ventricle = _ellipse(
            yy, xx, rng.uniform(-0.1, 0.1), side * rng.uniform(0.08, 0.14),
            rng.uniform(0.15, 0.25), rng.uniform(0.04, 0.07), side * rng.uniform(0.0, 0.3),
        )
        paint(ventricle & white, CSF)
    for _ in range(rng.integers(n_lesions[0], n_lesions[1] + 1)):
        lesion = _ellipse(
            yy, xx, rng.uniform(-0.45, 0.45) * ry, rng.uniform(-0.45, 0.45) * rx,
            rng.uniform(0.05, 0.1), rng.uniform(0.05, 0.1), rng.uniform(0, np.pi),
        )
        lesion_t1 = rng.uniform(*LESION_T1_RANGE)
        lesion_t2 = rng.uniform(*LESION_T2_RANGE)
        paint(lesion & head, Tissue("lesion-like", lesion_t1, lesion_t2, rng.uniform(*PD_RANGE)))

    if smooth:
        weight = ndimage.uniform_filter(head.astype(np.float64), size=3, mode="constant")
        safe = np.where(weight > 0, weight, 1.0)
        t1 = np.where(head, ndimage.uniform_filter(t1 * head, size=3, mode="constant") / safe, 0.0)
        t2 = np.where(head, ndimage.uniform_filter(t2 * head, size=3, mode="constant") / safe, 0.0)

    gain = 1.0 + 0.05 * (rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy)
    pd_mag = np.clip(pd_mag * gain, *PD_RANGE)
    phase = rng.uniform(-np.pi / 4, np.pi / 4) + rng.uniform(-0.5, 0.5) * xx + rng.uniform(-0.5, 0.5) * yy
    pd = np.where(head, pd_mag * np.exp(1j * phase), 0.0)

    head_mask = np.abs(pd) > 0
    q = QMaps(
        np.where(head_mask, t1, 0.0),
        np.where(head_mask, t2, 0.0),
        pd.real.copy(),
        pd.imag.copy(),
        head_mask,
    )
    q.validate()
    return q


def synthesize_tsmi(
    q: QMaps,
    source: SequenceSchedule | Dictionary,
    basis: TemporalBasis,
    n_states: int = DEFAULT_N_STATES,
) -> Tsmi:
    """
    TSMI of a QMaps slice: PD_v times the compressed fingerprint of (T1_v, T2_v).

    Args:
        q: Ground-truth maps
        source: Schedule for exact EPG simulation, or a dictionary whose grid
            contains every in-mask (T1, T2) pair
        basis: Temporal basis for compression
        n_states: EPG truncation when simulating

    Raises:
        PhantomError: (T1, T2) outside the simulator domain or missing from the dictionary
    """
    q.validate()
    H, W = q.shape
    inside = q.head_mask.ravel()
    pairs = np.stack([q.t1_s.ravel()[inside], q.t2_s.ravel()[inside]], axis=1)
    data = np.zeros((H * W, basis.t), dtype=np.complex128)
    if pairs.shape[0] == 0:
        return Tsmi(data, (H, W))

    unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if isinstance(source, SequenceSchedule):
        atoms = compress(epg_fisp_batch(unique[:, 0], unique[:, 1], source, n_states), basis)
    else:
        lookup = {tuple(p): i for i, p in enumerate(source.grid)}
        missing = [tuple(p) for p in unique if tuple(p) not in lookup]
        if missing:
            raise PhantomError(f"{len(missing)} (T1, T2) pair(s) are not dictionary grid points, e.g. {missing[0]}")
        rows = source.atoms[[lookup[tuple(p)] for p in unique]]
        if source.is_compressed:
            if source.basis_digest != basis.digest():
                raise PhantomError("Dictionary was compressed with a different basis")
            atoms = rows
        else:
            atoms = compress(rows, basis)

    data[inside] = q.pd.ravel()[inside][:, None] * atoms[inverse]
    return Tsmi(data, (H, W))


def simulate_kspace(x: Tsmi, op: AcquisitionOperator) -> KSpaceData:
    """Noise-free measurements y = A x."""
    if x.grid != (op.H, op.W):
        raise ShapeError("simulate_kspace", "TSMI grid", dim="(H, W)", expected=(op.H, op.W), got=x.grid)
    return KSpaceData(op.forward(x.data), op.mask.digest())


@dataclass
class MrfSlice:
    """One dataset item. Ground truth is present for test slices and, on request, for train slices."""

    index: int
    split: str
    kspace: KSpaceData
    head_mask: np.ndarray
    qmaps: QMaps | None = None
    tsmi: Tsmi | None = None

    @property
    def has_ground_truth(self) -> bool:
        return self.qmaps is not None


@dataclass(frozen=True)
class SelfSupervisedItem:
    """What self-supervised training may see: measurements and the head mask only."""

    index: int
    kspace: KSpaceData
    head_mask: np.ndarray


@dataclass
class MrfDataset:
    """Train/test slices sharing one sampling mask and temporal basis."""

    train: list[MrfSlice]
    test: list[MrfSlice]
    mask: SamplingMask
    basis: TemporalBasis
    meta: dict[str, Any] = field(default_factory=dict)

    def operator(self) -> AcquisitionOperator:
        return AcquisitionOperator(self.mask, self.basis)

    def self_supervised(self, split: str = "train") -> Iterator[SelfSupervisedItem]:
        for s in self.split(split):
            yield SelfSupervisedItem(s.index, s.kspace, s.head_mask)

    def split(self, name: str) -> list[MrfSlice]:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        raise KeyError(f"Unknown split '{name}'")

    def digest(self) -> str:
        arrays = []
        for s in self.train + self.test:
            arrays.extend([s.kspace.samples, s.head_mask])
            if s.qmaps is not None:
                arrays.append(s.qmaps.to_channels())
        return hash_arrays(*arrays, extra=f"{self.mask.digest()}{self.basis.digest()}")

    def manifest(self) -> dict[str, Any]:
        return {
            **self.meta,
            "splits": {
                "train": [s.index for s in self.train],
                "test": [s.index for s in self.test],
            },
            "mask_digest": self.mask.digest(),
            "basis_digest": self.basis.digest(),
            "digest": self.digest(),
        }


def _make_slice(
    index: int,
    split: str,
    seed: int,
    op: AcquisitionOperator,
    schedule: SequenceSchedule,
    n_states: int,
    smooth: bool,
    keep_ground_truth: bool,
) -> MrfSlice:
    q = make_brain_phantom(op.H, op.W, seed=[seed, index], smooth=smooth)
    x = synthesize_tsmi(q, schedule, op.basis, n_states)
    y = simulate_kspace(x, op)
    if keep_ground_truth:
        return MrfSlice(index, split, y, q.head_mask, q, x)
    return MrfSlice(index, split, y, q.head_mask)


def build_dataset(
    n_train_slices: int,
    n_test_slices: int,
    op: AcquisitionOperator,
    schedule: SequenceSchedule,
    seed: int = 0,
    n_states: int = DEFAULT_N_STATES,
    smooth: bool = True,
    keep_train_ground_truth: bool = False,
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> MrfDataset:
    """
    Generate phantoms, TSMIs and k-space for a train and a test split.

    Slice i uses the seed sequence [seed, i], so slices are independent of
    the worker count. Train slices keep only k-space and the head mask unless
    ``keep_train_ground_truth`` is set (needed for supervised training).

    Args:
        n_train_slices, n_test_slices: Split sizes, at least 1 each
        op: Acquisition operator (fixes grid, mask and basis)
        schedule: Sequence used for exact TSMI synthesis
        seed: Dataset seed
        n_states: EPG truncation
        smooth: Phantom T1/T2 smoothing
        keep_train_ground_truth: Store QMaps and TSMI for train slices too
        workers: Parallel slice generation
        progress: Optional callback (done, total)
    """
    if n_train_slices < 1 or n_test_slices < 1:
        raise PhantomError("Both splits need at least one slice")

    total = n_train_slices + n_test_slices
    jobs = [
        (i, "train" if i < n_train_slices else "test", i < n_train_slices and not keep_train_ground_truth)
        for i in range(total)
    ]
    slices: list[MrfSlice] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            pool.submit(_make_slice, i, split, seed, op, schedule, n_states, smooth, not drop_truth)
            for i, split, drop_truth in jobs
        ]
        for done, future in enumerate(futures, start=1):
            slices.append(future.result())
            if progress:
                progress(done, total)

    meta = {
        "kind": "dataset",
        "H": op.H,
        "W": op.W,
        "pattern": op.mask.pattern,
        "m": op.m,
        "T": op.T,
        "t": op.t,
        "seed": seed,
        "n_states": n_states,
        "smooth": smooth,
        "schedule_digest": schedule.digest(),
        "train_ground_truth": keep_train_ground_truth,
    }
    logger.info(
        "Built dataset: %d train / %d test slices at %dx%d (%s, n/m = %.1f)",
        n_train_slices, n_test_slices, op.H, op.W, op.mask.pattern, op.compression_ratio,
    )
    return MrfDataset(slices[:n_train_slices], slices[n_train_slices:], op.mask, op.basis, meta)


def save_dataset(dataset: MrfDataset, root: Path) -> Path:
    """
    Write ``dataset.json``, the mask, the basis and one directory per slice.

    Returns:
        Path of the top-level manifest
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_mask(dataset.mask, root / "mask")
    dataset.basis.save(root / "basis")
    for s in dataset.train + dataset.test:
        arrays: dict[str, np.ndarray] = {"kspace": s.kspace.samples, "head_mask": s.head_mask}
        if s.qmaps is not None:
            arrays.update({"t1_s": s.qmaps.t1_s, "t2_s": s.qmaps.t2_s, "pd": s.qmaps.pd})
        if s.tsmi is not None:
            arrays["tsmi"] = s.tsmi.data
        save_bundle(
            root / s.split / f"slice_{s.index:04d}" / "data",
            arrays,
            {
                "kind": "slice",
                "index": s.index,
                "split": s.split,
                "mask_ref": s.kspace.mask_ref,
                "seed": [dataset.meta.get("seed"), s.index],
                "pattern": dataset.mask.pattern,
                "basis_digest": dataset.basis.digest(),
            },
        )
    manifest_path = root / "dataset.json"
    save_json_file(manifest_path, dataset.manifest())
    return manifest_path


def load_dataset(root: Path) -> MrfDataset:
    root = Path(root)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise PhantomError(f"No dataset manifest at {manifest_path}", manifest_path)
    manifest = load_json_file(manifest_path)
    mask = load_mask(root / "mask")
    basis = TemporalBasis.load(root / "basis")
    if mask.digest() != manifest["mask_digest"] or basis.digest() != manifest["basis_digest"]:
        raise PhantomError("Mask or basis does not match the dataset manifest", manifest_path)

    grid = mask.grid
    splits: dict[str, list[MrfSlice]] = {"train": [], "test": []}
    for split, indices in manifest["splits"].items():
        for index in indices:
            arrays, meta = load_bundle(root / split / f"slice_{index:04d}" / "data")
            head_mask = arrays["head_mask"]
            qmaps = None
            if "t1_s" in arrays:
                pd = arrays["pd"]
                qmaps = QMaps(arrays["t1_s"], arrays["t2_s"], pd.real.copy(), pd.imag.copy(), head_mask)
            tsmi = Tsmi(arrays["tsmi"], grid) if "tsmi" in arrays else None
            splits[split].append(
                MrfSlice(index, split, KSpaceData(arrays["kspace"], meta["mask_ref"]), head_mask, qmaps, tsmi)
            )
    meta = {k: v for k, v in manifest.items() if k not in ("splits", "mask_digest", "basis_digest", "digest")}
    return MrfDataset(splits["train"], splits["test"], mask, basis, meta)

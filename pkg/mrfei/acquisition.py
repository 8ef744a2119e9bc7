"""
Cartesian k-space sampling and the compressed MRF acquisition operator.

Provides:
- SamplingMask with rotating-spiral, shifting-EPI and full-sampling generators
- AcquisitionOperator: TSMI (n x t) -> expand with V^H -> unitary 2-D FFT per
  frame -> sample m locations per frame, and its exact adjoint
- Real-channel wrappers so the operator can sit inside the autodiff graph
- Mask file I/O (JSON header plus little-endian uint32 index pairs)

Mask indices are (kx, ky) positions on the centred k-space grid: the origin sits
at column W // 2 and row H // 2 (fftshift layout).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from mrfei.subspace import TemporalBasis
from mrfei.tensor import LinearOperatorNode, ShapeError
from mrfei.utils import hash_arrays, load_json_file, save_json_file

logger = logging.getLogger(__name__)

GOLDEN_ANGLE_DEG = 180.0 * (3.0 - math.sqrt(5.0))
GOLDEN_RATIO_CONJUGATE = (math.sqrt(5.0) - 1.0) / 2.0
PATTERNS = ("spiral", "epi")

# rasterisation step along the spiral arm, in pixels
_SPIRAL_STEP_PX = 0.25


class MaskError(ValueError):
    """Exception raised for impossible or malformed sampling masks."""

    def __init__(self, message: str, pattern: str | None = None, frame: int | None = None):
        self.message = message
        self.pattern = pattern
        self.frame = frame
        super().__init__(self.message)


@dataclass(frozen=True)
class SamplingMask:
    """
    Per-frame k-space sampling locations.

    Attributes:
        frames: Integer array (T, m, 2) of (kx, ky) centred-grid indices
        grid: (H, W)
        pattern: Generator name
        params: Generator parameters, kept for the mask file header
    """

    frames: np.ndarray
    grid: tuple[int, int]
    pattern: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.int64)
        if frames.ndim != 3 or frames.shape[2] != 2:
            raise MaskError(f"Frames must have shape (T, m, 2), got {frames.shape}", self.pattern)
        object.__setattr__(self, "frames", frames)
        H, W = self.grid
        kx, ky = frames[..., 0], frames[..., 1]
        if np.any(kx < 0) or np.any(kx >= W) or np.any(ky < 0) or np.any(ky >= H):
            raise MaskError("Sample indices outside the k-space grid", self.pattern)
        flat = ky * W + kx
        for f in range(frames.shape[0]):
            if np.unique(flat[f]).size != frames.shape[1]:
                raise MaskError("Frame contains duplicate samples", self.pattern, f)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def m(self) -> int:
        return self.frames.shape[1]

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def compression_ratio(self) -> float:
        """Spatial compression ratio n / m."""
        return self.n / self.m

    def flat_indices(self) -> np.ndarray:
        """(T, m) indices into a row-major, unshifted H x W FFT output."""
        H, W = self.grid
        kx, ky = self.frames[..., 0], self.frames[..., 1]
        return ((ky - H // 2) % H) * W + ((kx - W // 2) % W)

    def to_dense(self) -> np.ndarray:
        """Boolean (T, H, W) sampling pattern in the centred layout."""
        H, W = self.grid
        dense = np.zeros((self.T, H, W), dtype=bool)
        f = np.repeat(np.arange(self.T), self.m)
        dense[f, self.frames[..., 1].ravel(), self.frames[..., 0].ravel()] = True
        return dense

    def coverage(self) -> np.ndarray:
        """Boolean (H, W) union of all frames."""
        return self.to_dense().any(axis=0)

    def digest(self) -> str:
        return hash_arrays(self.frames, extra=f"{self.grid}{self.pattern}")

    def header(self) -> dict[str, Any]:
        return {
            "kind": "mask",
            "pattern": self.pattern,
            "H": self.grid[0],
            "W": self.grid[1],
            "m": self.m,
            "T": self.T,
            "origin": "center",
            "index_order": ["kx", "ky"],
            "dtype": "<u4",
            "params": self.params,
            "digest": self.digest(),
        }


def _check_capacity(H: int, W: int, m: int, pattern: str) -> None:
    if m < 1:
        raise MaskError(f"m must be positive, got {m}", pattern)
    if m > H * W:
        raise MaskError(f"m={m} exceeds the {H}x{W} grid ({H * W} locations)", pattern)


def _spiral_frame(H: int, W: int, m: int, angle_rad: float) -> np.ndarray:
    """Rasterise one rotated Archimedean arm to exactly m unique (kx, ky) points."""
    radius = math.hypot(H / 2, W / 2)
    max_turns = float(max(H, W))
    n_turns = 0.5
    while True:
        theta_max = 2 * math.pi * n_turns
        a = radius / theta_max
        n_pts = int(math.ceil(theta_max * math.hypot(radius, a) / _SPIRAL_STEP_PX)) + 1
        theta = np.linspace(0.0, theta_max, n_pts)
        r = a * theta
        kx = np.rint(r * np.cos(theta + angle_rad)).astype(np.int64) + W // 2
        ky = np.rint(r * np.sin(theta + angle_rad)).astype(np.int64) + H // 2
        inside = (kx >= 0) & (kx < W) & (ky >= 0) & (ky < H)
        flat = ky[inside] * W + kx[inside]
        _, first = np.unique(flat, return_index=True)
        ordered = flat[np.sort(first)]
        if ordered.size >= m or n_turns >= max_turns:
            break
        n_turns *= 1.1

    if ordered.size < m:
        # arm saturated: continue outwards through the unsampled locations
        yy, xx = np.mgrid[0:H, 0:W]
        rest = np.setdiff1d(np.arange(H * W), ordered, assume_unique=False)
        dy = yy.ravel()[rest] - H // 2
        dx = xx.ravel()[rest] - W // 2
        rest = rest[np.lexsort((np.arctan2(dy, dx), np.hypot(dy, dx)))]
        ordered = np.concatenate([ordered, rest])

    ordered = ordered[:m]
    return np.stack([ordered % W, ordered // W], axis=1)


def make_spiral_mask(
    H: int,
    W: int,
    m: int,
    T: int,
    rotation_increment_deg: float = GOLDEN_ANGLE_DEG,
) -> SamplingMask:
    """
    Rotating single-arm Archimedean spiral.

    The arm r = a * theta runs from the k-space centre to the corner radius. Its
    number of turns grows until the rasterised arm holds at least m distinct
    in-bounds locations; the first m along the arm are kept. Frame f is rotated
    by (f * rotation_increment_deg) mod 360.

    Raises:
        MaskError: m exceeds H * W
    """
    _check_capacity(H, W, m, "spiral")
    frames = np.empty((T, m, 2), dtype=np.int64)
    for f in range(T):
        angle = math.radians((f * rotation_increment_deg) % 360.0)
        frames[f] = _spiral_frame(H, W, m, angle)
    logger.debug("Spiral mask %dx%d, m=%d, T=%d", H, W, m, T)
    return SamplingMask(frames, (H, W), "spiral", {"rotation_increment_deg": rotation_increment_deg})


def epi_stride(H: int) -> int:
    """Row shift per frame: the integer nearest H * 0.618... that is coprime with H."""
    target = H * GOLDEN_RATIO_CONJUGATE
    base = int(round(target))
    for delta in range(H + 1):
        for candidate in (base - delta, base + delta) if delta else (base,):
            if 0 < candidate and math.gcd(candidate, H) == 1:
                return candidate
    return 1


def make_epi_mask(H: int, W: int, m: int, T: int, stride: int | None = None) -> SamplingMask:
    """
    Shifting multi-shot EPI lines.

    Each frame samples ceil(m / W) horizontal lines spaced H // L rows apart,
    starting at row (f * stride) mod H. The last line is cut to a centred
    segment so the frame holds exactly m samples.

    Raises:
        MaskError: m exceeds H * W
    """
    _check_capacity(H, W, m, "epi")
    stride = epi_stride(H) if stride is None else stride
    n_lines = math.ceil(m / W)
    spacing = H // n_lines
    last_len = m - (n_lines - 1) * W
    last_cols = np.arange(W // 2 - last_len // 2, W // 2 - last_len // 2 + last_len)
    full_cols = np.arange(W)

    frames = np.empty((T, m, 2), dtype=np.int64)
    for f in range(T):
        start = (f * stride) % H
        points = []
        for j in range(n_lines):
            row = (start + j * spacing) % H
            cols = full_cols if j < n_lines - 1 else last_cols
            points.append(np.stack([cols, np.full(cols.size, row)], axis=1))
        frames[f] = np.concatenate(points)
    logger.debug("EPI mask %dx%d, m=%d (%d lines), stride %d", H, W, m, n_lines, stride)
    return SamplingMask(frames, (H, W), "epi", {"stride": stride, "lines": n_lines})


def make_full_mask(H: int, W: int, T: int) -> SamplingMask:
    """Every k-space location in every frame."""
    yy, xx = np.mgrid[0:H, 0:W]
    frame = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return SamplingMask(np.broadcast_to(frame, (T, H * W, 2)).copy(), (H, W), "full")


def make_mask(pattern: str, H: int, W: int, m: int, T: int, **kwargs: Any) -> SamplingMask:
    """Dispatch on ``pattern`` ('spiral', 'epi' or 'full')."""
    if pattern == "spiral":
        return make_spiral_mask(H, W, m, T, **kwargs)
    if pattern == "epi":
        return make_epi_mask(H, W, m, T, **kwargs)
    if pattern == "full":
        return make_full_mask(H, W, T)
    raise MaskError(f"Unknown sampling pattern '{pattern}'", pattern)


def save_mask(mask: SamplingMask, stem: Path) -> Path:
    """Write ``<stem>.json`` (header) and ``<stem>.idx`` (uint32 kx, ky pairs per frame)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    mask.frames.astype("<u4").tofile(stem.with_suffix(".idx"))
    header_path = stem.with_suffix(".json")
    save_json_file(header_path, mask.header())
    return header_path


def load_mask(stem: Path) -> SamplingMask:
    stem = Path(stem)
    header = load_json_file(stem.with_suffix(".json"))
    if header.get("kind") != "mask":
        raise MaskError(f"{stem} is not a mask file")
    raw = np.fromfile(stem.with_suffix(".idx"), dtype="<u4")
    expected = header["T"] * header["m"] * 2
    if raw.size != expected:
        raise MaskError(f"Mask payload has {raw.size} values, header implies {expected}", header.get("pattern"))
    frames = raw.astype(np.int64).reshape(header["T"], header["m"], 2)
    return SamplingMask(frames, (header["H"], header["W"]), header["pattern"], header.get("params", {}))


class AcquisitionOperator:
    """
    Linear map A from TSMIs (n x t, complex) to k-space data (m x T, complex).

    All methods accept optional leading batch axes.
    """

    def __init__(self, mask: SamplingMask, basis: TemporalBasis):
        if mask.T != basis.T:
            raise ShapeError("AcquisitionOperator", "mask and basis frame counts", dim="T", expected=basis.T, got=mask.T)
        self.mask = mask
        self.basis = basis
        self.H, self.W = mask.grid
        self.n = mask.n
        self.m = mask.m
        self.T = mask.T
        self.t = basis.t
        self._idx = mask.flat_indices()
        self._V = basis.V
        self._Vh = basis.V.conj().T

    @property
    def compression_ratio(self) -> float:
        return self.mask.compression_ratio

    def digest(self) -> str:
        return hash_arrays(extra=f"{self.mask.digest()}{self.basis.digest()}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(..., n, t) TSMI -> (..., m, T) k-space samples."""
        x = np.asarray(x)
        if x.shape[-2:] != (self.n, self.t):
            raise ShapeError("forward", "TSMI shape", dim="(n, t)", expected=(self.n, self.t), got=x.shape[-2:])
        lead = x.shape[:-2]
        frames = x @ self._Vh
        images = np.moveaxis(frames.reshape(*lead, self.H, self.W, self.T), -1, -3)
        kspace = np.fft.fft2(images, norm="ortho").reshape(*lead, self.T, self.n)
        idx = self._idx.reshape((1,) * len(lead) + self._idx.shape)
        samples = np.take_along_axis(kspace, idx, axis=-1)
        return np.swapaxes(samples, -1, -2)

    def backproject(self, y: np.ndarray) -> np.ndarray:
        """(..., m, T) k-space samples -> (..., n, t) TSMI; the exact adjoint of :meth:`forward`."""
        y = np.asarray(y)
        if y.shape[-2:] != (self.m, self.T):
            raise ShapeError("backproject", "k-space shape", dim="(m, T)", expected=(self.m, self.T), got=y.shape[-2:])
        lead = y.shape[:-2]
        kspace = np.zeros((*lead, self.T, self.n), dtype=np.complex128)
        idx = self._idx.reshape((1,) * len(lead) + self._idx.shape)
        np.put_along_axis(kspace, np.broadcast_to(idx, (*lead, *self._idx.shape)), np.swapaxes(y, -1, -2), axis=-1)
        images = np.fft.ifft2(kspace.reshape(*lead, self.T, self.H, self.W), norm="ortho")
        frames = np.moveaxis(images, -3, -1).reshape(*lead, self.n, self.T)
        return frames @ self._V

    def normal(self, x: np.ndarray) -> np.ndarray:
        """A^H A x."""
        return self.backproject(self.forward(x))

    def operator_norm(self, iterations: int = 50, seed: int = 0) -> float:
        """Power-iteration estimate of the spectral norm ||A||."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((self.n, self.t)) + 1j * rng.standard_normal((self.n, self.t))
        x /= np.linalg.norm(x)
        estimate = 0.0
        for _ in range(iterations):
            z = self.normal(x)
            norm = np.linalg.norm(z)
            if norm == 0:
                return 0.0
            estimate = float(np.sqrt(np.vdot(x, z).real))
            x = z / norm
        return estimate

    def as_linear_node(self) -> LinearOperatorNode:
        """
        A in real-channel form for the autodiff graph.

        Input (N, 2t, H, W) stacks real then imaginary TSMI channels; output
        (N, 2, m, T) stacks real and imaginary k-space samples.
        """

        def forward_map(ch: np.ndarray) -> np.ndarray:
            return complex_to_pairs(self.forward(channels_to_tsmi(ch)))

        def adjoint_map(pairs: np.ndarray) -> np.ndarray:
            return tsmi_to_channels(self.backproject(pairs_to_complex(pairs)), self.H, self.W)

        return LinearOperatorNode(
            forward_map=forward_map,
            adjoint_map=adjoint_map,
            in_shape=(2 * self.t, self.H, self.W),
            out_shape=(2, self.m, self.T),
            name="A",
        )

    def normal_node(self) -> LinearOperatorNode:
        """A^H A in real-channel form; self-adjoint."""
        node = self.as_linear_node()

        def compose(ch: np.ndarray) -> np.ndarray:
            return node.adjoint_map(node.forward_map(ch))

        return LinearOperatorNode(compose, compose, node.in_shape, node.in_shape, "AhA")

    def describe(self) -> dict[str, Any]:
        return {
            "pattern": self.mask.pattern,
            "H": self.H,
            "W": self.W,
            "m": self.m,
            "T": self.T,
            "t": self.t,
            "compression_ratio": self.compression_ratio,
            "mask_digest": self.mask.digest(),
            "basis_digest": self.basis.digest(),
        }


def tsmi_to_channels(x: np.ndarray, H: int, W: int) -> np.ndarray:
    """(N, n, t) complex -> (N, 2t, H, W) real, real parts first."""
    x = np.asarray(x)
    n_items, n, t = x.shape
    if n != H * W:
        raise ShapeError("tsmi_to_channels", "voxel count", dim="n", expected=H * W, got=n)
    img = np.moveaxis(x.reshape(n_items, H, W, t), -1, 1)
    return np.concatenate([img.real, img.imag], axis=1)


def channels_to_tsmi(ch: np.ndarray) -> np.ndarray:
    """(N, 2t, H, W) real -> (N, n, t) complex."""
    ch = np.asarray(ch)
    n_items, c, H, W = ch.shape
    if c % 2:
        raise ShapeError("channels_to_tsmi", "channel count must be even", dim="C", expected="2t", got=c)
    t = c // 2
    z = ch[:, :t] + 1j * ch[:, t:]
    return np.moveaxis(z, 1, -1).reshape(n_items, H * W, t)


def complex_to_pairs(y: np.ndarray) -> np.ndarray:
    """(N, m, T) complex -> (N, 2, m, T) real."""
    return np.stack([y.real, y.imag], axis=1)


def pairs_to_complex(pairs: np.ndarray) -> np.ndarray:
    """(N, 2, m, T) real -> (N, m, T) complex."""
    return pairs[:, 0] + 1j * pairs[:, 1]

"""
FISP-MRF fingerprint simulation and (T1, T2) dictionaries.

Simulates an inversion-prepared, gradient-spoiled FISP train with the Extended
Phase Graph formalism. Per repetition: RF rotation of the (F+, F-, Z) states,
relaxation over TE, signal read from F+_0, relaxation over TR - TE, then one
unit gradient shift of the dephased states.

A brute-force isochromat simulation of the same train is provided as an oracle.
"""

from __future__ import annotations

import csv
import io
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from mrfei.tensor import NumericalError
from mrfei.utils import get_cache_dir, hash_arrays, load_bundle, save_bundle, short_hash

logger = logging.getLogger(__name__)

T1_DOMAIN = (0.01, 6.0)
T2_DOMAIN = (0.004, 4.0)
DEFAULT_N_STATES = 128
DEFAULT_TI = 0.018
DEFAULT_TR = 0.010
DEFAULT_TE = 0.0018
SCHEDULE_RESOURCE = "fisp_flip_schedule.csv"


class ScheduleError(ValueError):
    """Exception raised for invalid sequence schedules or schedule files."""

    def __init__(self, message: str, path: Path | None = None, line: int | None = None):
        self.message = message
        self.path = path
        self.line = line
        where = f" ({path}{'' if line is None else f':{line}'})" if path else ""
        super().__init__(f"{message}{where}")


class DictionaryError(ValueError):
    """Exception raised for empty or inconsistent dictionaries."""


@dataclass(frozen=True)
class SequenceSchedule:
    """Flip-angle train and timing of an inversion-prepared FISP acquisition."""

    flip_angles_deg: tuple[float, ...]
    inversion_time_s: float = DEFAULT_TI
    repetition_time_s: float = DEFAULT_TR
    echo_time_s: float = DEFAULT_TE
    inversion: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "flip_angles_deg", tuple(float(a) for a in self.flip_angles_deg))
        if len(self.flip_angles_deg) < 1:
            raise ScheduleError("Schedule needs at least one repetition")
        if min(self.inversion_time_s, self.repetition_time_s, self.echo_time_s) <= 0:
            raise ScheduleError("Sequence timings must be positive")
        if self.echo_time_s >= self.repetition_time_s:
            raise ScheduleError(
                f"Echo time {self.echo_time_s} s must be shorter than TR {self.repetition_time_s} s"
            )
        bad = [a for a in self.flip_angles_deg if not 0.0 <= a <= 180.0]
        if bad:
            raise ScheduleError(f"Flip angles must lie in [0, 180] degrees, got {bad[0]}")

    @property
    def T(self) -> int:
        """Number of repetitions."""
        return len(self.flip_angles_deg)

    @property
    def flip_angles_rad(self) -> np.ndarray:
        return np.deg2rad(np.asarray(self.flip_angles_deg))

    def digest(self) -> str:
        timing = f"{self.inversion_time_s!r},{self.repetition_time_s!r},{self.echo_time_s!r},{self.inversion}"
        return hash_arrays(np.asarray(self.flip_angles_deg), extra=timing)

    def to_dict(self) -> dict[str, Any]:
        return {
            "T": self.T,
            "inversion_time_s": self.inversion_time_s,
            "repetition_time_s": self.repetition_time_s,
            "echo_time_s": self.echo_time_s,
            "inversion": self.inversion,
            "digest": self.digest(),
        }


@dataclass
class Fingerprint:
    """Transverse magnetisation sampled at TE of every repetition."""

    signal: np.ndarray

    def __len__(self) -> int:
        return self.signal.shape[0]


def _check_relaxation(t1: np.ndarray, t2: np.ndarray, n_states: int) -> None:
    if n_states < 2:
        raise ValueError(f"n_states must be at least 2, got {n_states}")
    if np.any(~np.isfinite(t1)) or np.any(~np.isfinite(t2)):
        raise NumericalError("non-finite relaxation times")
    if np.any(t1 <= 0) or np.any(t2 <= 0):
        raise ValueError("T1 and T2 must be positive")
    n_swapped = int(np.count_nonzero(t2 > t1))
    if n_swapped:
        logger.warning("%d (T1, T2) pair(s) have T2 > T1; simulating anyway", n_swapped)


def epg_fisp_batch(
    t1_s: np.ndarray,
    t2_s: np.ndarray,
    schedule: SequenceSchedule,
    n_states: int = DEFAULT_N_STATES,
) -> np.ndarray:
    """
    EPG simulation for many (T1, T2) pairs at once.

    Args:
        t1_s, t2_s: Relaxation times in seconds, shape (B,)
        schedule: Sequence to simulate
        n_states: Retained dephasing orders; higher orders are dropped.
            Values of at least T//2 + 1 give the untruncated signal

    Returns:
        Complex fingerprints, shape (B, T)
    """
    t1 = np.atleast_1d(np.asarray(t1_s, dtype=np.float64))
    t2 = np.atleast_1d(np.asarray(t2_s, dtype=np.float64))
    _check_relaxation(t1, t2, n_states)
    # orders above T/2 cannot refocus before the last echo
    n_states = max(2, min(n_states, schedule.T // 2 + 1))

    batch = t1.shape[0]
    te = schedule.echo_time_s
    rest = schedule.repetition_time_s - te
    e1_te, e2_te = np.exp(-te / t1)[:, None], np.exp(-te / t2)[:, None]
    e1_rest, e2_rest = np.exp(-rest / t1)[:, None], np.exp(-rest / t2)[:, None]

    fp = np.zeros((batch, n_states), dtype=np.complex128)
    fm = np.zeros((batch, n_states), dtype=np.complex128)
    z = np.zeros((batch, n_states), dtype=np.complex128)
    z[:, 0] = 1.0
    if schedule.inversion:
        e1_ti = np.exp(-schedule.inversion_time_s / t1)
        z[:, 0] = -e1_ti + (1.0 - e1_ti)

    signal = np.empty((batch, schedule.T), dtype=np.complex128)
    for i, alpha in enumerate(schedule.flip_angles_rad):
        c2 = np.cos(alpha / 2) ** 2
        s2 = np.sin(alpha / 2) ** 2
        sa, ca = np.sin(alpha), np.cos(alpha)
        fp, fm, z = (
            c2 * fp + s2 * fm - 1j * sa * z,
            s2 * fp + c2 * fm + 1j * sa * z,
            -0.5j * sa * fp + 0.5j * sa * fm + ca * z,
        )

        fp = fp * e2_te
        fm = fm * e2_te
        z = z * e1_te
        z[:, 0] += 1.0 - e1_te[:, 0]
        signal[:, i] = fp[:, 0]

        fp = fp * e2_rest
        fm = fm * e2_rest
        z = z * e1_rest
        z[:, 0] += 1.0 - e1_rest[:, 0]

        # unit gradient: F+ orders move up, F- orders move down
        shifted_fp = np.empty_like(fp)
        shifted_fm = np.empty_like(fm)
        shifted_fp[:, 1:] = fp[:, :-1]
        shifted_fm[:, :-1] = fm[:, 1:]
        shifted_fm[:, -1] = 0.0
        shifted_fp[:, 0] = np.conj(shifted_fm[:, 0])
        fp, fm = shifted_fp, shifted_fm

    if not np.all(np.isfinite(signal)):
        raise NumericalError("EPG simulation produced non-finite values")
    return signal


def epg_fisp(
    t1_s: float,
    t2_s: float,
    schedule: SequenceSchedule,
    n_states: int = DEFAULT_N_STATES,
) -> Fingerprint:
    """Simulate one FISP fingerprint with the Extended Phase Graph recursion."""
    return Fingerprint(epg_fisp_batch(np.array([t1_s]), np.array([t2_s]), schedule, n_states)[0])


def isochromat_fisp_batch(
    t1_s: np.ndarray,
    t2_s: np.ndarray,
    schedule: SequenceSchedule,
    n_spins: int = 512,
) -> np.ndarray:
    """
    Brute-force Bloch simulation with uniformly dephased spins.

    Each repetition's spoiler gradient winds spin j by 2*pi*j/n_spins. The
    result equals the untruncated EPG signal as long as fewer than n_spins
    dephasing orders are populated.
    """
    t1 = np.atleast_1d(np.asarray(t1_s, dtype=np.float64))[:, None]
    t2 = np.atleast_1d(np.asarray(t2_s, dtype=np.float64))[:, None]
    twist = np.exp(2j * np.pi * np.arange(n_spins) / n_spins)[None, :]

    mxy = np.zeros((t1.shape[0], n_spins), dtype=np.complex128)
    mz = np.ones((t1.shape[0], n_spins))
    if schedule.inversion:
        e1 = np.exp(-schedule.inversion_time_s / t1)
        mz = -mz * e1 + (1.0 - e1)

    def relax(dt: float) -> None:
        nonlocal mxy, mz
        e1 = np.exp(-dt / t1)
        mxy = mxy * np.exp(-dt / t2)
        mz = mz * e1 + (1.0 - e1)

    te = schedule.echo_time_s
    signal = np.empty((t1.shape[0], schedule.T), dtype=np.complex128)
    for i, alpha in enumerate(schedule.flip_angles_rad):
        # rotation about x
        mx, my = mxy.real, mxy.imag
        my_new = my * np.cos(alpha) - mz * np.sin(alpha)
        mz = my * np.sin(alpha) + mz * np.cos(alpha)
        mxy = mx + 1j * my_new
        relax(te)
        signal[:, i] = mxy.mean(axis=1)
        relax(schedule.repetition_time_s - te)
        mxy = mxy * twist
    return signal


def isochromat_fisp(
    t1_s: float,
    t2_s: float,
    schedule: SequenceSchedule,
    n_spins: int = 512,
) -> Fingerprint:
    return Fingerprint(isochromat_fisp_batch(np.array([t1_s]), np.array([t2_s]), schedule, n_spins)[0])


@dataclass(frozen=True)
class GridSpec:
    """
    Logarithmic (T1, T2) grid.

    Pairs are ordered row-major: T1 is the outer index, T2 the inner one.
    """

    t1_range: tuple[float, float] = T1_DOMAIN
    t2_range: tuple[float, float] = T2_DOMAIN
    n_t1: int = 60
    n_t2: int = 50
    t2_below_t1: bool = False

    def __post_init__(self) -> None:
        for name, (lo, hi), (dlo, dhi) in (
            ("T1", self.t1_range, T1_DOMAIN),
            ("T2", self.t2_range, T2_DOMAIN),
        ):
            if not dlo <= lo <= hi <= dhi:
                raise DictionaryError(f"{name} range {lo}..{hi} s lies outside [{dlo}, {dhi}] s")

    def t1_values(self) -> np.ndarray:
        return np.geomspace(self.t1_range[0], self.t1_range[1], self.n_t1)

    def t2_values(self) -> np.ndarray:
        return np.geomspace(self.t2_range[0], self.t2_range[1], self.n_t2)

    def pairs(self) -> np.ndarray:
        """Grid as an (N, 2) array of (T1, T2) in seconds."""
        t1, t2 = np.meshgrid(self.t1_values(), self.t2_values(), indexing="ij")
        pairs = np.stack([t1.ravel(), t2.ravel()], axis=1)
        if self.t2_below_t1:
            pairs = pairs[pairs[:, 1] <= pairs[:, 0]]
        return pairs

    def to_dict(self) -> dict[str, Any]:
        return {
            "t1_range": list(self.t1_range),
            "t2_range": list(self.t2_range),
            "n_t1": self.n_t1,
            "n_t2": self.n_t2,
            "t2_below_t1": self.t2_below_t1,
        }


@dataclass
class Dictionary:
    """
    Simulated fingerprints with their (T1, T2) coordinates.

    Atoms are time-domain (N x T) or, after :meth:`compress`, subspace
    coefficients (N x t) tagged with the basis digest. All-zero atoms are
    dropped at construction.
    """

    atoms: np.ndarray
    grid: np.ndarray
    schedule_digest: str = ""
    basis_digest: str | None = None
    normalized_atoms: np.ndarray = field(init=False, repr=False)
    norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.atoms = np.asarray(self.atoms, dtype=np.complex128)
        self.grid = np.asarray(self.grid, dtype=np.float64).reshape(-1, 2)
        if self.atoms.ndim != 2 or self.atoms.shape[0] != self.grid.shape[0]:
            raise DictionaryError(
                f"Atoms {self.atoms.shape} do not pair with grid {self.grid.shape}"
            )
        norms = np.linalg.norm(self.atoms, axis=1)
        keep = norms > 0
        if not np.all(keep):
            logger.info("Dropping %d all-zero atom(s)", int(np.count_nonzero(~keep)))
            self.atoms, self.grid, norms = self.atoms[keep], self.grid[keep], norms[keep]
        if self.atoms.shape[0] == 0:
            raise DictionaryError("Dictionary has no non-zero atoms")
        t1, t2 = self.grid[:, 0], self.grid[:, 1]
        if (
            np.any(t1 < T1_DOMAIN[0]) or np.any(t1 > T1_DOMAIN[1])
            or np.any(t2 < T2_DOMAIN[0]) or np.any(t2 > T2_DOMAIN[1])
        ):
            raise DictionaryError("Grid points outside the (T1, T2) domain")
        self.norms = norms
        self.normalized_atoms = self.atoms / norms[:, None]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def length(self) -> int:
        """T for time-domain atoms, t after compression."""
        return self.atoms.shape[1]

    @property
    def is_compressed(self) -> bool:
        return self.basis_digest is not None

    def digest(self) -> str:
        return hash_arrays(self.atoms, self.grid, extra=f"{self.schedule_digest}{self.basis_digest}")

    def compress(self, basis: Any) -> Dictionary:
        """Project atoms onto a temporal basis (x -> x V)."""
        from mrfei.subspace import compress

        if self.is_compressed:
            raise DictionaryError("Dictionary is already compressed")
        return Dictionary(
            compress(self.atoms, basis),
            self.grid.copy(),
            schedule_digest=self.schedule_digest,
            basis_digest=basis.digest(),
        )

    def save(self, stem: Path) -> Path:
        meta = {
            "kind": "dictionary",
            "N": self.size,
            "length": self.length,
            "t1_range": [float(self.grid[:, 0].min()), float(self.grid[:, 0].max())],
            "t2_range": [float(self.grid[:, 1].min()), float(self.grid[:, 1].max())],
            "schedule_digest": self.schedule_digest,
            "basis_digest": self.basis_digest,
        }
        return save_bundle(stem, {"atoms": self.atoms, "grid": self.grid}, meta)

    @classmethod
    def load(cls, stem: Path) -> Dictionary:
        arrays, meta = load_bundle(stem)
        if meta.get("kind") != "dictionary":
            raise DictionaryError(f"{stem} is not a dictionary bundle")
        return cls(
            arrays["atoms"],
            arrays["grid"],
            schedule_digest=meta.get("schedule_digest", ""),
            basis_digest=meta.get("basis_digest"),
        )


def build_dictionary(
    schedule: SequenceSchedule,
    grid_spec: GridSpec | np.ndarray,
    n_states: int = DEFAULT_N_STATES,
    chunk_size: int = 2048,
    progress: Callable[[int, int], None] | None = None,
) -> Dictionary:
    """
    Simulate a fingerprint for every grid pair.

    Args:
        schedule: Sequence to simulate
        grid_spec: Grid specification, or an explicit (N, 2) array of (T1, T2)
        n_states: EPG truncation order
        chunk_size: Pairs simulated per vectorised batch
        progress: Optional callback (done, total)
    """
    pairs = grid_spec.pairs() if isinstance(grid_spec, GridSpec) else np.asarray(grid_spec, dtype=np.float64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise DictionaryError("Grid is empty")

    atoms = np.empty((pairs.shape[0], schedule.T), dtype=np.complex128)
    for start in range(0, pairs.shape[0], chunk_size):
        stop = min(start + chunk_size, pairs.shape[0])
        atoms[start:stop] = epg_fisp_batch(pairs[start:stop, 0], pairs[start:stop, 1], schedule, n_states)
        if progress:
            progress(stop, pairs.shape[0])
    logger.debug("Simulated %d atoms of length %d", pairs.shape[0], schedule.T)
    return Dictionary(atoms, pairs, schedule_digest=schedule.digest())


def load_or_build_dictionary(
    schedule: SequenceSchedule,
    grid_spec: GridSpec,
    n_states: int = DEFAULT_N_STATES,
    cache_dir: Path | None = None,
    use_cache: bool = True,
) -> Dictionary:
    """Build a dictionary, reusing a cached copy keyed by schedule, grid and truncation."""
    key = hash_arrays(
        grid_spec.pairs(), extra=f"{schedule.digest()}|{n_states}|{grid_spec.to_dict()}"
    )
    stem = (cache_dir or get_cache_dir()) / "dictionaries" / f"dict-{short_hash(key)}"
    if use_cache and stem.with_suffix(".json").exists():
        logger.info("Using cached dictionary %s", stem.name)
        return Dictionary.load(stem)
    dictionary = build_dictionary(schedule, grid_spec, n_states)
    if use_cache:
        dictionary.save(stem)
    return dictionary


def load_schedule_csv(
    source: Path | str | io.TextIOBase,
    inversion_time_s: float = DEFAULT_TI,
    repetition_time_s: float = DEFAULT_TR,
    echo_time_s: float = DEFAULT_TE,
) -> SequenceSchedule:
    """
    Read a flip-angle schedule from CSV with columns ``index, flip_deg``.

    Raises:
        ScheduleError: Missing header, non-numeric values or indices that are
            not 0..T-1 in order
    """
    path = None
    if isinstance(source, (str, Path)):
        path = Path(source)
        text = path.read_text(encoding="utf-8")
    else:
        text = source.read()

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["index", "flip_deg"]:
        raise ScheduleError("Schedule CSV must start with header 'index,flip_deg'", path, 1)

    angles: list[float] = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise ScheduleError(f"Expected 2 columns, got {len(row)}", path, line_no)
        try:
            index = int(row[0])
            angle = float(row[1])
        except ValueError as e:
            raise ScheduleError(f"Malformed row {row}", path, line_no) from e
        if index != len(angles):
            raise ScheduleError(f"Expected index {len(angles)}, got {index}", path, line_no)
        angles.append(angle)

    if not angles:
        raise ScheduleError("Schedule has no rows", path)
    return SequenceSchedule(
        tuple(angles),
        inversion_time_s=inversion_time_s,
        repetition_time_s=repetition_time_s,
        echo_time_s=echo_time_s,
    )


def save_schedule_csv(schedule: SequenceSchedule, path: Path) -> None:
    """Write the flip angles as ``index, flip_deg`` rows with round-trip float formatting."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["index", "flip_deg"])
    for i, angle in enumerate(schedule.flip_angles_deg):
        writer.writerow([i, repr(angle)])
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")


def default_flip_schedule(path: Path | None = None) -> SequenceSchedule:
    """
    The built-in 200-repetition schedule, or a user schedule file.

    The shipped file is a smooth sinusoidal-lobe stand-in (peak 70 degrees),
    not the published FISP-MRF train; pass ``path`` to use another train.
    Timing is TI = 18 ms, TR = 10 ms, TE = 1.8 ms.
    """
    if path is not None:
        return load_schedule_csv(path)
    text = resources.files("mrfei.data").joinpath(SCHEDULE_RESOURCE).read_text(encoding="utf-8")
    return load_schedule_csv(io.StringIO(text))

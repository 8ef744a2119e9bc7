"""
Temporal SVD subspace for fingerprints and measurement frames.

The basis holds the top-t right singular vectors of the N x T dictionary. They
are computed from the eigen-decomposition of the T x T Gram matrix D^H D, which
is cheap when N >> T. Squaring the matrix squares its condition number, so
singular values below about sqrt(eps) * sigma_max are not resolved; only the
retained leading subspace matters here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import linalg

from mrfei.tensor import ShapeError
from mrfei.utils import hash_arrays, load_bundle, save_bundle

if TYPE_CHECKING:
    from mrfei.sequence import Dictionary

logger = logging.getLogger(__name__)

DEFAULT_RANK = 10


class BasisError(ValueError):
    """Exception raised for invalid subspace dimensions or basis files."""

    def __init__(self, message: str, t: int | None = None, T: int | None = None):
        self.message = message
        self.t = t
        self.T = T
        super().__init__(self.message)


@dataclass(frozen=True)
class TemporalBasis:
    """
    T x t complex matrix with orthonormal columns, ordered by descending singular value.

    Attributes:
        V: Basis vectors as columns
        singular_values: All min(N, T) singular values of the fitted matrix
        rank: Numerical rank of the fitted matrix
    """

    V: np.ndarray
    singular_values: np.ndarray
    rank: int

    @property
    def T(self) -> int:
        return self.V.shape[0]

    @property
    def t(self) -> int:
        return self.V.shape[1]

    @property
    def rank_deficient(self) -> bool:
        """True when some columns complete the basis beyond the fitted matrix's rank."""
        return self.rank < self.t

    def digest(self) -> str:
        return hash_arrays(self.V)

    def retained_energy(self) -> float:
        """Fraction of the fitted matrix's energy captured by the first t columns."""
        energy = self.singular_values**2
        total = energy.sum()
        return float(energy[: self.t].sum() / total) if total > 0 else 0.0

    @classmethod
    def identity(cls, T: int) -> TemporalBasis:
        """Full T x T identity basis (no compression)."""
        return cls(np.eye(T, dtype=np.complex128), np.ones(T), T)

    def to_dict(self) -> dict[str, Any]:
        return {
            "T": self.T,
            "t": self.t,
            "rank": self.rank,
            "rank_deficient": self.rank_deficient,
            "retained_energy": self.retained_energy(),
            "digest": self.digest(),
        }

    def save(self, stem: Path) -> Path:
        return save_bundle(
            stem,
            {"V": self.V, "singular_values": self.singular_values},
            {"kind": "basis", **self.to_dict()},
        )

    @classmethod
    def load(cls, stem: Path) -> TemporalBasis:
        arrays, meta = load_bundle(stem)
        if meta.get("kind") != "basis":
            raise BasisError(f"{stem} is not a basis bundle")
        basis = cls(arrays["V"], arrays["singular_values"], int(meta["rank"]))
        if meta.get("digest") and meta["digest"] != basis.digest():
            raise BasisError(f"Basis digest mismatch in {stem}")
        return basis


def _phase_normalize(V: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude entry is real and positive."""
    idx = np.argmax(np.abs(V), axis=0)
    pivots = V[idx, np.arange(V.shape[1])]
    phases = np.where(np.abs(pivots) > 0, np.conj(pivots) / np.abs(pivots), 1.0)
    return V * phases[None, :]


def fit_basis(source: Dictionary | np.ndarray, t: int = DEFAULT_RANK) -> TemporalBasis:
    """
    Fit the top-t right singular vectors of an N x T matrix.

    Args:
        source: Time-domain dictionary or a raw complex matrix
        t: Subspace dimension, 3 < t < T

    Returns:
        TemporalBasis; when the matrix has rank below t the trailing columns are
        an orthonormal completion and ``rank_deficient`` is set

    Raises:
        BasisError: t out of range or dictionary already compressed
    """
    if isinstance(source, np.ndarray):
        D = np.asarray(source, dtype=np.complex128)
    else:
        if source.is_compressed:
            raise BasisError("Cannot fit a basis to a compressed dictionary")
        D = source.atoms
    if D.ndim != 2:
        raise BasisError(f"Expected an N x T matrix, got shape {D.shape}")
    n_rows, T = D.shape
    if not 3 < t < T:
        raise BasisError(f"Subspace dimension must satisfy 3 < t < T, got t={t}, T={T}", t, T)

    gram = D.conj().T @ D
    gram = 0.5 * (gram + gram.conj().T)
    eigvals, eigvecs = linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    singular_values = np.sqrt(eigvals[: min(n_rows, T)])
    # Gram eigenvalues carry absolute error ~ eps * sigma_max^2
    tol = np.sqrt(max(n_rows, T) * np.finfo(np.float64).eps) * singular_values[0]
    rank = int(np.count_nonzero(singular_values > tol)) if singular_values[0] > 0 else 0

    V = _phase_normalize(np.ascontiguousarray(eigvecs[:, :t]))
    basis = TemporalBasis(V, singular_values, rank)
    if basis.rank_deficient:
        logger.warning("Dictionary rank %d is below t=%d; basis completed orthonormally", rank, t)
    logger.debug("Fitted %dx%d basis, retained energy %.6f", T, t, basis.retained_energy())
    return basis


def _check_time_axis(x: np.ndarray, expected: int, op: str) -> None:
    if x.shape[-1] != expected:
        raise ShapeError(op, "temporal axis", dim=-1, expected=expected, got=x.shape[-1])


def compress(x: np.ndarray, basis: TemporalBasis) -> np.ndarray:
    """Map length-T series (last axis) to t subspace coefficients: x V."""
    x = np.asarray(x)
    _check_time_axis(x, basis.T, "compress")
    return x @ basis.V


def decompress(z: np.ndarray, basis: TemporalBasis) -> np.ndarray:
    """Map t coefficients (last axis) back to length-T series: z V^H."""
    z = np.asarray(z)
    _check_time_axis(z, basis.t, "decompress")
    return z @ basis.V.conj().T


def projection_error(x: np.ndarray, basis: TemporalBasis) -> float:
    """Squared Frobenius norm of the part of ``x`` outside span(V)."""
    residual = np.asarray(x) - decompress(compress(x, basis), basis)
    return float(np.vdot(residual, residual).real)

"""
Dictionary matching of TSMIs and the SVD-MRF baseline.

For every in-mask voxel the best atom maximises |<x_v, d_i / ||d_i||>|; the
complex proton density is the inner product rescaled by the atom norm. Voxels
that are zero or outside the head mask get the (T1, T2) = (0, 0) sentinel.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mrfei.acquisition import AcquisitionOperator
from mrfei.phantom import KSpaceData, QMaps, Tsmi
from mrfei.sequence import Dictionary
from mrfei.subspace import TemporalBasis
from mrfei.tensor import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 4096


class MatchError(ValueError):
    """Exception raised when a TSMI and a dictionary live in different subspaces."""

    def __init__(self, message: str, expected: str | None = None, got: str | None = None):
        self.message = message
        self.expected = expected
        self.got = got
        super().__init__(self.message)


@dataclass
class MatchResult:
    """Matched maps plus the winning atom index (-1 where nothing was matched)."""

    t1_s: np.ndarray
    t2_s: np.ndarray
    pd_re: np.ndarray
    pd_im: np.ndarray
    correlation: np.ndarray
    index: np.ndarray

    def to_qmaps(self, head_mask: np.ndarray) -> QMaps:
        return QMaps(self.t1_s, self.t2_s, self.pd_re, self.pd_im, np.asarray(head_mask, dtype=bool))


def _check_subspace(x: Tsmi, dictionary: Dictionary, basis: TemporalBasis | None) -> None:
    if x.t != dictionary.length:
        raise ShapeError("dictionary_match", "TSMI and atom length", dim="t", expected=dictionary.length, got=x.t)
    if basis is not None:
        if not dictionary.is_compressed:
            raise MatchError("Dictionary is not compressed", basis.digest(), None)
        if dictionary.basis_digest != basis.digest():
            raise MatchError("Dictionary and TSMI use different bases", dictionary.basis_digest, basis.digest())


def _match_block(X: np.ndarray, atoms_h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = X @ atoms_h
    best = np.argmax(np.abs(scores), axis=1)
    return best, scores[np.arange(X.shape[0]), best]


def _assemble(
    shape: tuple[int, int],
    voxels: np.ndarray,
    X: np.ndarray,
    best: np.ndarray,
    score: np.ndarray,
    dictionary: Dictionary,
) -> MatchResult:
    n = shape[0] * shape[1]
    t1, t2 = np.zeros(n), np.zeros(n)
    pd = np.zeros(n, dtype=np.complex128)
    corr = np.zeros(n)
    index = np.full(n, -1, dtype=np.int64)

    x_norm = np.linalg.norm(X, axis=1)
    hit = x_norm > 0
    sel = voxels[hit]
    t1[sel] = dictionary.grid[best[hit], 0]
    t2[sel] = dictionary.grid[best[hit], 1]
    pd[sel] = score[hit] / dictionary.norms[best[hit]]
    corr[sel] = np.minimum(np.abs(score[hit]) / x_norm[hit], 1.0)
    index[sel] = best[hit]
    return MatchResult(
        t1.reshape(shape),
        t2.reshape(shape),
        pd.real.reshape(shape),
        pd.imag.reshape(shape),
        corr.reshape(shape),
        index.reshape(shape),
    )


def dictionary_match(
    x: Tsmi,
    dictionary: Dictionary,
    head_mask: np.ndarray,
    basis: TemporalBasis | None = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
    workers: int = 1,
) -> MatchResult:
    """
    Exhaustive matching in blocks of voxels.

    Args:
        x: TSMI in the dictionary's subspace
        dictionary: Compressed dictionary (or time-domain, if x is time-domain)
        head_mask: (H, W) voxels to match
        basis: When given, the dictionary must carry this basis's digest
        block_size: Voxels per matrix product
        workers: Threads over voxel blocks

    Raises:
        MatchError: Basis digest mismatch
    """
    _check_subspace(x, dictionary, basis)
    mask = np.asarray(head_mask, dtype=bool)
    if mask.shape != x.grid:
        raise ShapeError("dictionary_match", "head mask shape", dim="(H, W)", expected=x.grid, got=mask.shape)

    voxels = np.flatnonzero(mask.ravel())
    X = x.data[voxels]
    atoms_h = np.ascontiguousarray(dictionary.normalized_atoms.conj().T)
    starts = range(0, X.shape[0], block_size)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(lambda s: _match_block(X[s : s + block_size], atoms_h), starts))
    if parts:
        best = np.concatenate([p[0] for p in parts])
        score = np.concatenate([p[1] for p in parts])
    else:
        best = np.zeros(0, dtype=np.int64)
        score = np.zeros(0, dtype=np.complex128)
    logger.debug("Matched %d voxels against %d atoms", X.shape[0], dictionary.size)
    return _assemble(x.grid, voxels, X, best, score, dictionary)


def brute_force_match(x: Tsmi, dictionary: Dictionary, head_mask: np.ndarray) -> MatchResult:
    """Voxel-by-voxel linear scan over all atoms; reference for :func:`dictionary_match`."""
    mask = np.asarray(head_mask, dtype=bool)
    voxels = np.flatnonzero(mask.ravel())
    X = x.data[voxels]
    best = np.zeros(voxels.size, dtype=np.int64)
    score = np.zeros(voxels.size, dtype=np.complex128)
    for j, xv in enumerate(X):
        best_mag = -1.0
        for i, atom in enumerate(dictionary.normalized_atoms):
            s = np.vdot(atom, xv)
            if abs(s) > best_mag:
                best_mag, best[j], score[j] = abs(s), i, s
    return _assemble(x.grid, voxels, X, best, score, dictionary)


def svd_mrf_reconstruct(
    y: KSpaceData,
    op: AcquisitionOperator,
    dictionary: Dictionary,
    head_mask: np.ndarray,
    workers: int = 1,
) -> MatchResult:
    """Backproject the measurements and match the aliased TSMI."""
    if y.mask_ref and y.mask_ref != op.mask.digest():
        raise MatchError("k-space data was acquired with a different mask", op.mask.digest(), y.mask_ref)
    x = Tsmi(op.backproject(y.samples), (op.H, op.W))
    return dictionary_match(x, dictionary, head_mask, basis=op.basis, workers=workers)

"""
Rotations by multiples of 90 degrees and vertical flips (the dihedral group D4).

Transform ids:
    0 identity, 1 vertical flip, 2 rot90, 3 rot90 + flip, 4 rot180,
    5 rot180 + flip, 6 rot270, 7 rot270 + flip

A combined transform rotates first, then flips. Every transform is a pure
index permutation, so applying it and its inverse is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mrfei.tensor import DiffTensor, ShapeError

GROUP_ORDER = 8


@dataclass(frozen=True)
class SpatialTransform:
    """Rotation by ``quarter_turns`` x 90 degrees (counter-clockwise), then an optional vertical flip."""

    id: int
    quarter_turns: int
    flip: bool

    @property
    def name(self) -> str:
        if self.id == 0:
            return "identity"
        parts = [f"rot{90 * self.quarter_turns}"] if self.quarter_turns else []
        if self.flip:
            parts.append("vflip")
        return "+".join(parts)

    def apply(self, img: np.ndarray) -> np.ndarray:
        """Permute the last two axes of ``img``."""
        img = np.asarray(img)
        if img.ndim < 2:
            raise ShapeError(self.name, "need at least two axes", dim="rank", expected=2, got=img.ndim)
        if self.quarter_turns % 2 and img.shape[-1] != img.shape[-2]:
            raise ShapeError(self.name, "quarter-turn rotation needs a square grid", dim="H,W", expected="H == W", got=img.shape[-2:])
        out = np.rot90(img, self.quarter_turns, axes=(-2, -1))
        if self.flip:
            out = out[..., ::-1, :]
        return np.ascontiguousarray(out)

    def inverse(self) -> SpatialTransform:
        if self.flip:
            return self
        return TRANSFORMS[_transform_id((-self.quarter_turns) % 4, False)]


def _transform_id(quarter_turns: int, flip: bool) -> int:
    return 2 * quarter_turns + int(flip)


TRANSFORMS: tuple[SpatialTransform, ...] = tuple(
    sorted(
        (SpatialTransform(_transform_id(k, f), k, f) for k in range(4) for f in (False, True)),
        key=lambda tr: tr.id,
    )
)
NON_IDENTITY_IDS: tuple[int, ...] = tuple(range(1, GROUP_ORDER))

_PROBE = np.arange(9).reshape(3, 3)


def apply_transform(transform_id: int, img: np.ndarray) -> np.ndarray:
    return get_transform(transform_id).apply(img)


def get_transform(transform_id: int) -> SpatialTransform:
    if not 0 <= transform_id < GROUP_ORDER:
        raise ValueError(f"Transform id must be in 0..7, got {transform_id}")
    return TRANSFORMS[transform_id]


def compose(outer: int, inner: int) -> int:
    """Id of the transform equal to applying ``inner`` and then ``outer``."""
    target = get_transform(outer).apply(get_transform(inner).apply(_PROBE))
    for tr in TRANSFORMS:
        if np.array_equal(tr.apply(_PROBE), target):
            return tr.id
    raise AssertionError("D4 is closed under composition")


def sample_transforms(rng: np.random.Generator, count: int = 3) -> list[int]:
    """Draw ``count`` distinct non-identity transform ids."""
    if not 1 <= count <= len(NON_IDENTITY_IDS):
        raise ValueError(f"Can sample 1..{len(NON_IDENTITY_IDS)} transforms, got {count}")
    return [NON_IDENTITY_IDS[i] for i in rng.choice(len(NON_IDENTITY_IDS), size=count, replace=False)]


def transform_tensor(x: DiffTensor, transform_id: int) -> DiffTensor:
    """Differentiable transform of an (N, C, H, W) tensor; the backward pass applies the inverse."""
    tr = get_transform(transform_id)
    inv = tr.inverse()
    return DiffTensor.from_op(tr.apply(x.values), (x,), lambda g: (inv.apply(g),), f"transform:{tr.name}")

"""
Parameter containers, checkpoints and the reconstruction U-Net.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping, Sequence
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from mrfei.tensor import (
    DiffTensor,
    ShapeError,
    avgpool2,
    concat_channels,
    conv2d,
    relu,
    upsample2_nearest,
)
from mrfei.utils import hash_arrays, load_bundle, save_bundle

logger = logging.getLogger(__name__)


class CheckpointError(Exception):
    """Exception raised when a checkpoint does not fit the parameter set."""

    def __init__(self, message: str, path: Path | None = None, parameter: str | None = None):
        self.message = message
        self.path = path
        self.parameter = parameter
        super().__init__(self.message)


class ParameterSet(Mapping[str, DiffTensor]):
    """Named trainable tensors in declaration order."""

    def __init__(self) -> None:
        self._params: dict[str, DiffTensor] = {}

    def add(self, name: str, values: np.ndarray, requires_grad: bool = True) -> DiffTensor:
        if name in self._params:
            raise KeyError(f"Parameter '{name}' already declared")
        p = DiffTensor(np.array(values, dtype=np.float64), requires_grad=requires_grad, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> DiffTensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def as_dict(self) -> dict[str, DiffTensor]:
        return dict(self._params)

    @property
    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.size for p in self._params.values())

    def digest(self) -> str:
        """Content hash over names, shapes and values."""
        return hash_arrays(*(p.values for p in self._params.values()), extra=",".join(self._params))

    def set_trainable(self, trainable: bool) -> None:
        for p in self._params.values():
            p.requires_grad = trainable
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def save(self, stem: Path, meta: dict[str, Any] | None = None) -> Path:
        """Write a checkpoint: concatenated float64 values plus a (name, shape, offset) manifest."""
        return save_bundle(stem, {n: p.values for n, p in self._params.items()}, meta)

    def load(self, stem: Path) -> dict[str, Any]:
        """Load values saved by :meth:`save` into this set; returns the manifest."""
        arrays, manifest = load_bundle(stem)
        missing = [n for n in self._params if n not in arrays]
        if missing:
            raise CheckpointError(f"Checkpoint lacks parameters: {missing}", Path(stem), missing[0])
        for name, p in self._params.items():
            if arrays[name].shape != p.shape:
                raise CheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {arrays[name].shape}, model {p.shape}",
                    Path(stem),
                    name,
                )
            p.values[...] = arrays[name]
        return manifest


def he_normal(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """He-normal init for (Cout, Cin, k, k) kernels."""
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape))


class OutputMode(Enum):
    """What the reconstruction network predicts."""

    QMAP = "qmap"
    TSMI = "tsmi"


class ReconNetwork:
    """
    Small U-Net mapping backprojected TSMI channels to QMaps or TSMIs.

    Encoder/decoder with ``depth`` 2x2 poolings, two 3x3 conv + ReLU per level,
    skip connections by channel concatenation, a 1x1 head and no residual
    connection from input to output.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        mode: OutputMode,
        depth: int = 2,
        base_channels: int = 16,
        seed: int = 0,
        zero_head: bool = False,
        head_bias: Sequence[float] | None = None,
    ):
        """
        Initialize network.

        Args:
            in_channels: 2t stacked real/imaginary TSMI channels
            out_channels: 4 for QMaps (T1, T2, PD_re, PD_im), 2t for TSMIs
            mode: Output kind, fixed for the network's lifetime
            depth: Number of pooling levels
            base_channels: Feature channels at full resolution
            seed: Initialisation seed
            zero_head: Zero weights and bias of the final 1x1 layer
            head_bias: Initial bias of the final layer (ignored with zero_head)
        """
        if mode is OutputMode.QMAP and out_channels != 4:
            raise ShapeError("ReconNetwork", "QMap output needs 4 channels", dim="Cout", expected=4, got=out_channels)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.mode = mode
        self.depth = depth
        self.base_channels = base_channels
        self.params = ParameterSet()

        rng = np.random.default_rng(seed)
        widths = [base_channels * 2**level for level in range(depth + 1)]
        cin = in_channels
        for level in range(depth):
            self._declare_block(rng, f"enc{level}", cin, widths[level])
            cin = widths[level]
        self._declare_block(rng, "bottleneck", cin, widths[depth])
        for level in reversed(range(depth)):
            self._declare_block(rng, f"dec{level}", widths[level + 1] + widths[level], widths[level])

        if zero_head:
            head_w = np.zeros((out_channels, widths[0], 1, 1))
            head_b = np.zeros(out_channels)
        else:
            head_w = rng.normal(0.0, 0.1 / np.sqrt(widths[0]), size=(out_channels, widths[0], 1, 1))
            head_b = np.zeros(out_channels) if head_bias is None else np.asarray(head_bias, dtype=np.float64)
            if head_b.shape != (out_channels,):
                raise ShapeError("ReconNetwork", "head bias length", dim="Cout", expected=out_channels, got=head_b.shape)
        self.params.add("head.weight", head_w)
        self.params.add("head.bias", head_b)

    def _declare_block(self, rng: np.random.Generator, prefix: str, cin: int, cout: int) -> None:
        self.params.add(f"{prefix}.conv1.weight", he_normal(rng, (cout, cin, 3, 3)))
        self.params.add(f"{prefix}.conv1.bias", np.zeros(cout))
        self.params.add(f"{prefix}.conv2.weight", he_normal(rng, (cout, cout, 3, 3)))
        self.params.add(f"{prefix}.conv2.bias", np.zeros(cout))

    def _conv(self, name: str, x: DiffTensor) -> DiffTensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _block(self, prefix: str, x: DiffTensor) -> DiffTensor:
        x = relu(self._conv(f"{prefix}.conv1", x))
        return relu(self._conv(f"{prefix}.conv2", x))

    def check_input(self, shape: tuple[int, ...]) -> None:
        if len(shape) != 4:
            raise ShapeError("ReconNetwork", "expected (N, C, H, W)", dim="rank", expected=4, got=len(shape))
        if shape[1] != self.in_channels:
            raise ShapeError("ReconNetwork", "input channels", dim="C", expected=self.in_channels, got=shape[1])
        factor = 2**self.depth
        for dim, size in zip(("H", "W"), shape[2:], strict=True):
            if size % factor:
                raise ShapeError("ReconNetwork", f"spatial size must be divisible by {factor}", dim=dim, expected=factor, got=size)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        self.check_input(x.shape)
        skips = []
        h = x
        for level in range(self.depth):
            h = self._block(f"enc{level}", h)
            skips.append(h)
            h = avgpool2(h)
        h = self._block("bottleneck", h)
        for level in reversed(range(self.depth)):
            h = upsample2_nearest(h)
            h = concat_channels([h, skips[level]])
            h = self._block(f"dec{level}", h)
        return self._conv("head", h)

    def describe(self) -> dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "mode": self.mode.value,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "parameters": self.params.count,
        }

    def save(self, stem: Path, meta: dict[str, Any] | None = None) -> Path:
        return self.params.save(stem, {"network": self.describe(), **(meta or {})})

    @classmethod
    def load(cls, stem: Path) -> tuple[ReconNetwork, dict[str, Any]]:
        """Rebuild a network from a checkpoint written by :meth:`save`."""
        _, manifest = load_bundle(stem)
        info = manifest.get("network")
        if not info:
            raise CheckpointError("Checkpoint has no network description", Path(stem))
        net = cls(
            info["in_channels"],
            info["out_channels"],
            OutputMode(info["mode"]),
            depth=info["depth"],
            base_channels=info["base_channels"],
        )
        net.params.load(stem)
        return net, manifest

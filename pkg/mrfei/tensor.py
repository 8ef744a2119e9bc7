"""
Dense float64 arrays with reverse-mode differentiation.

Provides:
- DiffTensor, a graph node holding values and a lazily allocated gradient
- Differentiable ops for small convolutional networks (conv2d, relu, pooling, ...)
- LinearOperatorNode for fixed linear maps with user-supplied adjoints
- Finite-difference gradient checking and the adjoint dot-product test

Complex data never enters the graph: callers stack real and imaginary parts
as separate channels.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    """Exception raised when operand shapes do not conform."""

    def __init__(
        self,
        op: str,
        message: str,
        dim: str | int | None = None,
        expected: Any = None,
        got: Any = None,
    ):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        self.message = f"{op}: {message}"
        if dim is not None:
            self.message += f" (dimension {dim}: expected {expected}, got {got})"
        super().__init__(self.message)


class NumericalError(ArithmeticError):
    """Exception raised for NaN/inf values in simulations, losses or gradients."""

    def __init__(
        self,
        message: str,
        parameter: str | None = None,
        epoch: int | None = None,
        value: float | None = None,
    ):
        self.message = message
        self.parameter = parameter
        self.epoch = epoch
        self.value = value
        super().__init__(self.message)


class DiffTensor:
    """
    Node of a reverse-mode differentiation graph.

    Leaves are created directly; interior nodes come from the op functions in this
    module. A node that does not require gradients keeps no parents, so graphs are
    pruned to the part that can reach a trainable leaf.
    """

    __slots__ = ("values", "grad", "requires_grad", "parents", "_backward", "op", "name")

    def __init__(self, values: Any, requires_grad: bool = False, name: str | None = None):
        self.values: np.ndarray = np.asarray(values, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[DiffTensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(
        cls,
        values: np.ndarray,
        parents: Sequence[DiffTensor],
        backward: BackwardFn,
        op: str,
    ) -> DiffTensor:
        """Create an interior node; ``backward`` maps the upstream gradient to one gradient per parent."""
        out = cls(values)
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        """Return the value of a one-element tensor as a Python float."""
        if self.values.size != 1:
            raise ShapeError("item", "tensor has more than one element", expected=1, got=self.size)
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Copy of the values."""
        return self.values.copy()

    def detach(self) -> DiffTensor:
        """Same values, cut from the graph."""
        return DiffTensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """
        Accumulate gradients into every reachable node that requires them.

        Args:
            grad: Upstream gradient; defaults to 1 for one-element tensors
        """
        if not self.requires_grad:
            raise ShapeError("backward", "tensor does not require gradients")
        if grad is None:
            if self.values.size != 1:
                raise ShapeError(
                    "backward", "implicit gradient needs a scalar", expected=1, got=self.size
                )
            grad = np.ones_like(self.values)
        elif np.shape(grad) != self.shape:
            raise ShapeError("backward", "seed gradient shape", dim="all", expected=self.shape, got=np.shape(grad))

        order = self._topological_order()
        self.grad = np.array(grad, dtype=np.float64) if self.grad is None else self.grad + grad

        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node.parents, parent_grads, strict=True):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g

    def _topological_order(self) -> list[DiffTensor]:
        """Iterative post-order DFS; each node appears once."""
        order: list[DiffTensor] = []
        visited: set[int] = set()
        stack: list[tuple[DiffTensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __add__(self, other: DiffTensor) -> DiffTensor:
        return add(self, other)

    def __sub__(self, other: DiffTensor) -> DiffTensor:
        return sub(self, other)

    def __mul__(self, other: DiffTensor | float) -> DiffTensor:
        if isinstance(other, DiffTensor):
            return mul_elementwise(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> DiffTensor:
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"


def _check_same_shape(op: str, a: DiffTensor, b: DiffTensor) -> None:
    if a.shape != b.shape:
        dim = next(
            (i for i, (x, y) in enumerate(zip(a.shape, b.shape, strict=False)) if x != y),
            "rank",
        )
        raise ShapeError(op, "operands differ in shape", dim=dim, expected=a.shape, got=b.shape)


def _check_nchw(op: str, x: DiffTensor) -> None:
    if x.ndim != 4:
        raise ShapeError(op, "expected an (N, C, H, W) tensor", dim="rank", expected=4, got=x.ndim)


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape("add", a, b)
    return DiffTensor.from_op(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape("sub", a, b)
    return DiffTensor.from_op(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul_elementwise(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape("mul_elementwise", a, b)
    av, bv = a.values, b.values
    return DiffTensor.from_op(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(x: DiffTensor, factor: float, offset: float = 0.0) -> DiffTensor:
    """Affine map ``factor * x + offset`` with constant coefficients."""
    values = x.values * factor
    if offset:
        values = values + offset
    return DiffTensor.from_op(values, (x,), lambda g: (g * factor,), "scale")


def relu(x: DiffTensor) -> DiffTensor:
    active = x.values > 0
    return DiffTensor.from_op(np.where(active, x.values, 0.0), (x,), lambda g: (g * active,), "relu")


def log(x: DiffTensor) -> DiffTensor:
    if np.any(x.values <= 0):
        raise NumericalError("log of a non-positive value", value=float(x.values.min()))
    xv = x.values
    return DiffTensor.from_op(np.log(xv), (x,), lambda g: (g / xv,), "log")


def clip(
    x: DiffTensor,
    lo: float | np.ndarray,
    hi: float | np.ndarray,
    straight_through: bool = False,
) -> DiffTensor:
    """
    Clamp into [lo, hi].

    With ``straight_through`` the gradient passes unchanged; otherwise it is zero
    where the clamp is active.
    """
    values = np.clip(x.values, lo, hi)
    if straight_through:
        return DiffTensor.from_op(values, (x,), lambda g: (g,), "clip")
    inside = (x.values >= lo) & (x.values <= hi)
    return DiffTensor.from_op(values, (x,), lambda g: (g * inside,), "clip")


def reshape(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", "element count changes", dim="size", expected=x.size, got=shape)
    original = x.shape
    return DiffTensor.from_op(
        x.values.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape"
    )


def concat(xs: Sequence[DiffTensor], axis: int) -> DiffTensor:
    if not xs:
        raise ShapeError("concat", "nothing to concatenate")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref):
            raise ShapeError("concat", "rank mismatch", dim="rank", expected=len(ref), got=x.ndim)
        for d, (r, s) in enumerate(zip(ref, x.shape, strict=True)):
            if d != axis % len(ref) and r != s:
                raise ShapeError("concat", "non-concatenated dimension differs", dim=d, expected=r, got=s)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return DiffTensor.from_op(np.concatenate([x.values for x in xs], axis=axis), xs, backward, "concat")


def concat_channels(xs: Sequence[DiffTensor]) -> DiffTensor:
    for x in xs:
        _check_nchw("concat_channels", x)
    return concat(xs, axis=1)


def slice_channels(x: DiffTensor, start: int, stop: int) -> DiffTensor:
    _check_nchw("slice_channels", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError("slice_channels", "channel range out of bounds", dim=1, expected=x.shape[1], got=(start, stop))
    shape = x.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return DiffTensor.from_op(x.values[:, start:stop].copy(), (x,), backward, "slice_channels")


def slice_batch(x: DiffTensor, start: int, stop: int) -> DiffTensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError("slice_batch", "item range out of bounds", dim=0, expected=x.shape[0], got=(start, stop))
    shape = x.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return DiffTensor.from_op(x.values[start:stop].copy(), (x,), backward, "slice_batch")


def mul_channelwise(x: DiffTensor, m: DiffTensor) -> DiffTensor:
    """Multiply every channel of ``x`` (N, C, H, W) by the single-channel map ``m`` (N, 1, H, W)."""
    _check_nchw("mul_channelwise", x)
    _check_nchw("mul_channelwise", m)
    expected = (x.shape[0], 1, *x.shape[2:])
    if m.shape != expected:
        raise ShapeError("mul_channelwise", "map shape", dim="all", expected=expected, got=m.shape)
    xv, mv = x.values, m.values

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * mv, np.sum(g * xv, axis=1, keepdims=True)

    return DiffTensor.from_op(xv * mv, (x, m), backward, "mul_channelwise")


def avgpool2(x: DiffTensor) -> DiffTensor:
    """2x2 average pooling, stride 2."""
    _check_nchw("avgpool2", x)
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avgpool2", "spatial size must be even", dim="H,W", expected="even", got=(h, w))
    v = x.values
    pooled = ((v[:, :, 0::2, 0::2] + v[:, :, 0::2, 1::2]) + (v[:, :, 1::2, 0::2] + v[:, :, 1::2, 1::2])) * 0.25

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return DiffTensor.from_op(pooled, (x,), backward, "avgpool2")


def upsample2_nearest(x: DiffTensor) -> DiffTensor:
    _check_nchw("upsample2_nearest", x)
    n, c, h, w = x.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    up = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)
    return DiffTensor.from_op(up, (x,), backward, "upsample2_nearest")


def _correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded, stride-1 cross-correlation of (N, Cin, H, W) with (Cout, Cin, k, k)."""
    k = kernel.shape[-1]
    if k == 1:
        return np.einsum("nchw,oc->nohw", x, kernel[:, :, 0, 0], optimize=True)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", windows, kernel, optimize=True)


def _kernel_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return np.einsum("nchw,nohw->oc", x, g, optimize=True)[:, :, None, None]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)


def conv2d(x: DiffTensor, kernel: DiffTensor, bias: DiffTensor) -> DiffTensor:
    """
    2-D cross-correlation with zero 'same' padding and stride 1.

    Args:
        x: Input (N, Cin, H, W)
        kernel: Weights (Cout, Cin, k, k), k odd
        bias: Bias (Cout,)
    """
    _check_nchw("conv2d", x)
    if kernel.ndim != 4:
        raise ShapeError("conv2d", "kernel must be 4-D", dim="rank", expected=4, got=kernel.ndim)
    cout, cin, kh, kw = kernel.shape
    if x.shape[1] != cin:
        raise ShapeError("conv2d", "input channels", dim="Cin", expected=cin, got=x.shape[1])
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", "kernel must be square with odd size", dim="k", expected="odd", got=(kh, kw))
    if bias.shape != (cout,):
        raise ShapeError("conv2d", "bias length", dim="Cout", expected=cout, got=bias.shape)

    xv, kv = x.values, kernel.values
    out = _correlate(xv, kv) + bias.values[None, :, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_x = _correlate(g, np.ascontiguousarray(kv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        return grad_x, _kernel_grad(xv, g, kh), g.sum(axis=(0, 2, 3))

    return DiffTensor.from_op(out, (x, kernel, bias), backward, "conv2d")


def mse_loss(a: DiffTensor, b: DiffTensor, mask: np.ndarray | None = None) -> DiffTensor:
    """
    Mean squared difference.

    Args:
        a, b: Same-shape operands
        mask: Optional boolean array of the same shape; the mean runs over
            selected elements only and unselected elements never enter the value
    """
    _check_same_shape("mse_loss", a, b)
    diff = a.values - b.values
    if mask is None:
        count = diff.size
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError("mse_loss", "mask shape", dim="all", expected=a.shape, got=mask.shape)
        count = int(mask.sum())
        if count == 0:
            raise ShapeError("mse_loss", "mask selects no elements")
        diff = np.where(mask, diff, 0.0)
    value = np.array(np.sum(diff * diff) / count)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad = diff * (2.0 * float(g) / count)
        return grad, -grad

    return DiffTensor.from_op(value, (a, b), backward, "mse_loss")


@dataclass(frozen=True)
class LinearOperatorNode:
    """
    A fixed linear map with a matrix-free adjoint.

    Both maps act on batched arrays: ``forward_map`` takes (N, *in_shape) to
    (N, *out_shape) and ``adjoint_map`` goes the other way.
    """

    forward_map: Callable[[np.ndarray], np.ndarray]
    adjoint_map: Callable[[np.ndarray], np.ndarray]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    name: str = "linear"

    def adjoint(self) -> LinearOperatorNode:
        """The adjoint as a node of its own."""
        return LinearOperatorNode(
            forward_map=self.adjoint_map,
            adjoint_map=self.forward_map,
            in_shape=self.out_shape,
            out_shape=self.in_shape,
            name=f"{self.name}^H",
        )

    @classmethod
    def identity(cls, shape: Sequence[int]) -> LinearOperatorNode:
        shape = tuple(shape)
        return cls(lambda x: x.copy(), lambda y: y.copy(), shape, shape, "identity")

    @classmethod
    def zero(cls, in_shape: Sequence[int], out_shape: Sequence[int]) -> LinearOperatorNode:
        in_shape, out_shape = tuple(in_shape), tuple(out_shape)
        return cls(
            lambda x: np.zeros((x.shape[0], *out_shape)),
            lambda y: np.zeros((y.shape[0], *in_shape)),
            in_shape,
            out_shape,
            "zero",
        )


def apply_linear(node: LinearOperatorNode, x: DiffTensor) -> DiffTensor:
    """Apply a fixed linear operator; the backward pass applies its adjoint."""
    if x.shape[1:] != node.in_shape:
        raise ShapeError(f"apply_linear[{node.name}]", "input shape", dim="all", expected=node.in_shape, got=x.shape[1:])
    out = np.asarray(node.forward_map(x.values), dtype=np.float64)
    expected = (x.shape[0], *node.out_shape)
    if out.shape != expected:
        raise ShapeError(f"apply_linear[{node.name}]", "operator output shape", dim="all", expected=expected, got=out.shape)
    return DiffTensor.from_op(out, (x,), lambda g: (node.adjoint_map(g),), f"linear:{node.name}")


def dot_test(
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
) -> float:
    """
    Relative mismatch of the adjoint identity for one (x, y) pair.

    Returns |<Ax, y> - <x, A^H y>| / (||Ax|| ||y|| + ||x|| ||A^H y||).
    """
    ax = forward(x)
    ahy = adjoint(y)
    lhs = np.vdot(y, ax)
    rhs = np.vdot(ahy, x)
    denom = np.linalg.norm(ax) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(ahy)
    if denom == 0:
        return 0.0
    return float(abs(lhs - rhs) / denom)


def gradcheck(
    fn: Callable[[], DiffTensor],
    inputs: Sequence[DiffTensor],
    h: float = 1e-5,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Compare autodiff gradients of a scalar function against central differences.

    Args:
        fn: Zero-argument callable rebuilding the graph from ``inputs``
        inputs: Leaves whose values are perturbed in place
        h: Finite-difference step
        max_checks: Probe at most this many random entries per input
        rng: Generator used to pick probed entries

    Returns:
        Max over probed entries of |auto - fd| / (|fd| + 1e-8)
    """
    for x in inputs:
        x.zero_grad()
    out = fn()
    out.backward()
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for x, grad in zip(inputs, analytic, strict=True):
        if not x.requires_grad:
            continue
        flat = x.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            worst = max(worst, abs(grad.reshape(-1)[i] - fd) / (abs(fd) + 1e-8))
    for x in inputs:
        x.zero_grad()
    return worst


def check_finite(values: np.ndarray, what: str, epoch: int | None = None) -> None:
    """Raise NumericalError if ``values`` holds NaN or inf."""
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {what}", parameter=what, epoch=epoch)

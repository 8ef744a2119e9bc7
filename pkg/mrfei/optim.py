"""
Adam optimiser and step learning-rate schedule.

Weight decay is classic L2: ``weight_decay * w`` is added to the gradient before
the moment updates (not the decoupled AdamW form).
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from mrfei.tensor import DiffTensor, NumericalError


@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, DiffTensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """
    One bias-corrected Adam update, applied in place to ``params``.

    Parameters missing from ``grads`` are treated as having a zero gradient.

    Raises:
        NumericalError: A gradient holds NaN or inf; nothing is updated
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'", parameter=name)

    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.values) if g is None else g
        if weight_decay:
            g = g + weight_decay * p.values
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.values -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


@dataclass(frozen=True)
class StepSchedule:
    """Constant learning rate, divided by ``drop_factor`` from ``drop_epoch`` onwards."""

    base_lr: float
    drop_epoch: int | None = None
    drop_factor: float = 10.0

    def lr_at(self, epoch: int) -> float:
        if self.drop_epoch is not None and epoch >= self.drop_epoch:
            return self.base_lr / self.drop_factor
        return self.base_lr


@dataclass(frozen=True)
class MultiStepSchedule:
    """Learning rate divided by ``drop_factor`` at each milestone epoch."""

    base_lr: float
    milestones: tuple[int, ...] = ()
    drop_factor: float = 10.0

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr / self.drop_factor**drops


class Adam:
    """
    Stateful wrapper around :func:`adam_step` for a fixed parameter set.

    Reads ``.grad`` from each parameter; parameters without a gradient get a
    zero gradient for the step.
    """

    def __init__(
        self,
        params: Mapping[str, DiffTensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(
            self.params,
            grads,
            self.state,
            lr=self.lr if lr is None else lr,
            beta1=self.betas[0],
            beta2=self.betas[1],
            eps=self.eps,
            weight_decay=self.weight_decay,
        )

"""
Finite-difference checks of the differentiation engine.

``gradcheck_suite`` probes every differentiable op on small random inputs,
then the normal operator A^H A and the data-consistency and equivariance
losses of a toy 8x8 NLEI setup (depth-1 network, small surrogate, spiral
operator).
"""

from __future__ import annotations

import logging
from collections.abc import Callable

import numpy as np

from mrfei.acquisition import AcquisitionOperator, complex_to_pairs, make_spiral_mask
from mrfei.nn import OutputMode, ReconNetwork
from mrfei.sequence import T1_DOMAIN, T2_DOMAIN
from mrfei.subspace import fit_basis
from mrfei.surrogate import BlochSurrogate
from mrfei.tensor import (
    DiffTensor,
    LinearOperatorNode,
    add,
    apply_linear,
    avgpool2,
    concat_channels,
    conv2d,
    gradcheck,
    log,
    mse_loss,
    mul_channelwise,
    mul_elementwise,
    relu,
    reshape,
    scale,
    slice_batch,
    slice_channels,
    sub,
    upsample2_nearest,
)
from mrfei.training import ForwardModel, backprojection_input, loss_ei, loss_mc
from mrfei.transforms import transform_tensor

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
TOY_SIZE = 8


def _leaf(rng: np.random.Generator, shape: tuple[int, ...], positive: bool = False) -> DiffTensor:
    values = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return DiffTensor(values, requires_grad=True)


def toy_problem(seed: int = 0) -> tuple[ReconNetwork, ForwardModel, np.ndarray, np.ndarray]:
    """
    A tiny NLEI setup: returns (network, forward model, k-space pairs, head mask).

    The network's head bias keeps (T1, T2) well inside the surrogate's
    clamp range, where the straight-through clamp is the identity.
    """
    rng = np.random.default_rng(seed)
    T, t, m = 12, 4, 6
    basis = fit_basis(rng.normal(size=(40, T)) + 1j * rng.normal(size=(40, T)), t)
    op = AcquisitionOperator(make_spiral_mask(TOY_SIZE, TOY_SIZE, m, T), basis)
    surrogate = BlochSurrogate(t, T1_DOMAIN, T2_DOMAIN, hidden=8, seed=seed)
    surrogate.freeze()
    network = ReconNetwork(2 * t, 4, OutputMode.QMAP, depth=1, base_channels=4, seed=seed, head_bias=(1.0, 0.5, 0.6, 0.1))
    y = rng.normal(size=(2, m, T)) + 1j * rng.normal(size=(2, m, T))
    head_mask = np.zeros((2, TOY_SIZE, TOY_SIZE), dtype=bool)
    head_mask[:, 1:-1, 2:-1] = True
    return network, ForwardModel(op, surrogate, norm=1.0), complex_to_pairs(y), head_mask


def _op_checks(rng: np.random.Generator) -> dict[str, tuple[Callable[[], DiffTensor], list[DiffTensor]]]:
    a, b = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 3, 4, 4))
    pos = _leaf(rng, (2, 3, 4, 4), positive=True)
    m = _leaf(rng, (2, 1, 4, 4))
    k, bias = _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (2,))
    target = DiffTensor(rng.normal(size=(2, 3, 4, 4)))
    small = DiffTensor(rng.normal(size=(2, 3, 2, 2)))
    big = DiffTensor(rng.normal(size=(2, 3, 8, 8)))
    conv_target = DiffTensor(rng.normal(size=(2, 2, 4, 4)))
    lin = _leaf(rng, (2, 5))
    matrix = rng.normal(size=(5, 3))
    node = LinearOperatorNode(lambda x: x @ matrix, lambda y: y @ matrix.T, (5,), (3,), "matrix")
    lin_target = DiffTensor(rng.normal(size=(2, 3)))

    return {
        "add": (lambda: mse_loss(add(a, b), target), [a, b]),
        "sub": (lambda: mse_loss(sub(a, b), target), [a, b]),
        "mul_elementwise": (lambda: mse_loss(mul_elementwise(a, b), target), [a, b]),
        "scale": (lambda: mse_loss(scale(a, 1.7, 0.3), target), [a]),
        "relu": (lambda: mse_loss(relu(a), target), [a]),
        "log": (lambda: mse_loss(log(pos), target), [pos]),
        "reshape": (lambda: mse_loss(reshape(reshape(a, (6, 16)), (2, 3, 4, 4)), target), [a]),
        "concat_channels": (lambda: mse_loss(slice_channels(concat_channels([a, b]), 1, 4), target), [a, b]),
        "slice_batch": (lambda: mse_loss(slice_batch(a, 1, 2), slice_batch(target, 0, 1)), [a]),
        "mul_channelwise": (lambda: mse_loss(mul_channelwise(a, m), target), [a, m]),
        "avgpool2": (lambda: mse_loss(avgpool2(a), small), [a]),
        "upsample2_nearest": (lambda: mse_loss(upsample2_nearest(a), big), [a]),
        "conv2d": (lambda: mse_loss(conv2d(a, k, bias), conv_target), [a, k, bias]),
        "transform": (lambda: mse_loss(transform_tensor(a, 3), target), [a]),
        "apply_linear": (lambda: mse_loss(apply_linear(node, lin), lin_target), [lin]),
        "mse_loss": (lambda: mse_loss(a, b, mask=np.asarray(target.values > 0)), [a, b]),
    }


def gradcheck_suite(seed: int = 0, max_checks: int = 8) -> dict[str, float]:
    """
    Max relative error of autodiff against central differences, per check.

    Args:
        seed: Seed for inputs and probed entries
        max_checks: Probed entries per input tensor
    """
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    for name, (fn, inputs) in _op_checks(rng).items():
        results[name] = gradcheck(fn, inputs, max_checks=max_checks, rng=rng)

    network, model, y_pairs, head_mask = toy_problem(seed)
    inp = DiffTensor(backprojection_input(model.op, y_pairs[:, 0] + 1j * y_pairs[:, 1], model.norm))
    y = DiffTensor(y_pairs)
    params = list(network.params.values())
    normal = model.op.normal_node()
    z = _leaf(rng, (1, *normal.in_shape))
    z_target = DiffTensor(rng.normal(size=z.shape))

    def mc() -> DiffTensor:
        return loss_mc(model.predict(network, inp, head_mask), y, model)

    def ei() -> DiffTensor:
        return loss_ei(network, model.predict(network, inp, head_mask), model, (1, 4, 7), head_mask)

    results["normal_operator"] = gradcheck(
        lambda: mse_loss(apply_linear(normal, z), z_target), [z], max_checks=max_checks, rng=rng
    )
    results["loss_mc"] = gradcheck(mc, params, max_checks=max_checks, rng=rng)
    results["loss_ei"] = gradcheck(ei, params, max_checks=max_checks, rng=rng)
    worst = max(results.values())
    logger.info("Gradient check: worst relative error %.2e over %d checks", worst, len(results))
    return results

"""
Unit tests for the reverse-mode differentiation engine.
"""

import numpy as np
import pytest

from mrfei.tensor import (
    DiffTensor,
    LinearOperatorNode,
    NumericalError,
    ShapeError,
    add,
    apply_linear,
    avgpool2,
    check_finite,
    clip,
    concat_channels,
    conv2d,
    dot_test,
    gradcheck,
    log,
    mse_loss,
    mul_channelwise,
    relu,
    reshape,
    scale,
    slice_channels,
    upsample2_nearest,
)


def leaf(rng: np.random.Generator, *shape: int) -> DiffTensor:
    return DiffTensor(rng.normal(size=shape), requires_grad=True)


class TestDiffTensor:
    """Tests for graph construction and backward."""

    def test_constant_nodes_keep_no_parents(self):
        a = DiffTensor(np.ones(3))
        b = DiffTensor(np.ones(3))
        out = add(a, b)
        assert not out.requires_grad
        assert out.parents == ()

    def test_backward_on_constant_raises(self):
        with pytest.raises(ShapeError):
            DiffTensor(np.ones(1)).backward()

    def test_implicit_seed_needs_scalar(self, rng):
        x = leaf(rng, 2, 2)
        with pytest.raises(ShapeError, match="scalar"):
            scale(x, 2.0).backward()

    def test_item(self):
        assert DiffTensor([3.5]).item() == 3.5
        with pytest.raises(ShapeError):
            DiffTensor([1.0, 2.0]).item()

    def test_reused_node_accumulates(self):
        x = DiffTensor(np.array([2.0]), requires_grad=True)
        y = add(x, x)
        out = mse_loss(y, DiffTensor(np.zeros(1)))
        out.backward()
        # d/dx (2x)^2 = 8x
        assert x.grad[0] == pytest.approx(16.0)

    def test_detach_cuts_graph(self, rng):
        x = leaf(rng, 3)
        d = scale(x, 2.0).detach()
        assert not d.requires_grad
        np.testing.assert_allclose(d.values, 2.0 * x.values)

    def test_operators(self, rng):
        a, b = leaf(rng, 4), leaf(rng, 4)
        np.testing.assert_allclose((a + b).values, a.values + b.values)
        np.testing.assert_allclose((a - b).values, a.values - b.values)
        np.testing.assert_allclose((a * b).values, a.values * b.values)
        np.testing.assert_allclose((3.0 * a).values, 3.0 * a.values)
        np.testing.assert_allclose((-a).values, -a.values)

    def test_deep_chain_does_not_recurse(self):
        x = DiffTensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = scale(y, 1.0)
        y.backward()
        assert x.grad[0] == pytest.approx(1.0)


class TestShapes:
    """Tests for shape validation."""

    def test_add_mismatch_names_dimension(self, rng):
        with pytest.raises(ShapeError) as exc:
            add(leaf(rng, 2, 3), leaf(rng, 2, 4))
        assert exc.value.dim == 1
        assert exc.value.expected == (2, 3)

    def test_conv_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="input channels"):
            conv2d(leaf(rng, 1, 2, 4, 4), leaf(rng, 3, 5, 3, 3), leaf(rng, 3))

    def test_conv_even_kernel(self, rng):
        with pytest.raises(ShapeError, match="odd"):
            conv2d(leaf(rng, 1, 2, 4, 4), leaf(rng, 3, 2, 2, 2), leaf(rng, 3))

    def test_avgpool_odd_size(self, rng):
        with pytest.raises(ShapeError, match="even"):
            avgpool2(leaf(rng, 1, 1, 5, 4))

    def test_mul_channelwise_map_shape(self, rng):
        with pytest.raises(ShapeError):
            mul_channelwise(leaf(rng, 1, 3, 4, 4), leaf(rng, 1, 2, 4, 4))

    def test_reshape_count(self, rng):
        with pytest.raises(ShapeError):
            reshape(leaf(rng, 2, 3), (4, 2))

    def test_slice_out_of_range(self, rng):
        with pytest.raises(ShapeError):
            slice_channels(leaf(rng, 1, 3, 2, 2), 2, 5)

    def test_mse_empty_mask(self, rng):
        a = leaf(rng, 2, 2)
        with pytest.raises(ShapeError, match="no elements"):
            mse_loss(a, a, mask=np.zeros((2, 2), dtype=bool))


class TestOps:
    """Tests for forward values."""

    def test_conv_identity_kernel(self, rng):
        x = leaf(rng, 2, 3, 5, 5)
        kernel = np.zeros((3, 3, 3, 3))
        for c in range(3):
            kernel[c, c, 1, 1] = 1.0
        out = conv2d(x, DiffTensor(kernel), DiffTensor(np.full(3, 0.5)))
        np.testing.assert_allclose(out.values, x.values + 0.5)

    def test_conv_zero_padding(self):
        x = DiffTensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, DiffTensor(np.ones((1, 1, 3, 3))), DiffTensor(np.zeros(1)))
        assert out.values[0, 0, 1, 1] == 9.0
        assert out.values[0, 0, 0, 0] == 4.0

    def test_pool_then_upsample(self, rng):
        x = leaf(rng, 1, 2, 4, 4)
        up = upsample2_nearest(avgpool2(x))
        assert up.shape == x.shape
        np.testing.assert_allclose(up.values[0, 0, 0, 0], x.values[0, 0, :2, :2].mean())

    def test_mse_mask_ignores_unselected(self):
        a = DiffTensor(np.array([1.0, 100.0]))
        b = DiffTensor(np.array([0.0, 0.0]))
        assert mse_loss(a, b, mask=np.array([True, False])).item() == pytest.approx(1.0)

    def test_clip_gradients(self):
        x = DiffTensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        clip(x, 0.0, 1.0).backward(np.ones(3))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
        x.zero_grad()
        clip(x, 0.0, 1.0, straight_through=True).backward(np.ones(3))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_log_rejects_non_positive(self):
        with pytest.raises(NumericalError):
            log(DiffTensor(np.array([1.0, 0.0])))

    def test_check_finite(self):
        check_finite(np.ones(3), "ok")
        with pytest.raises(NumericalError) as exc:
            check_finite(np.array([1.0, np.nan]), "loss", epoch=4)
        assert exc.value.epoch == 4


class TestGradients:
    """Finite-difference checks per op."""

    @pytest.mark.parametrize(
        "build",
        [
            lambda a, b, t: mse_loss(relu(a), t),
            lambda a, b, t: mse_loss(a * b, t),
            lambda a, b, t: mse_loss(scale(a, -2.0, 1.0), t),
            lambda a, b, t: mse_loss(slice_channels(concat_channels([a, b]), 2, 5), t),
            lambda a, b, t: mse_loss(upsample2_nearest(avgpool2(a)), t),
            lambda a, b, t: mse_loss(mul_channelwise(a, slice_channels(b, 0, 1)), t),
        ],
    )
    def test_ops(self, rng, build):
        a, b = leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 3, 4, 4)
        target = DiffTensor(rng.normal(size=(2, 3, 4, 4)))
        assert gradcheck(lambda: build(a, b, target), [a, b], max_checks=10, rng=rng) < 1e-4

    def test_conv2d(self, rng):
        x, k, bias = leaf(rng, 2, 3, 5, 5), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
        target = DiffTensor(rng.normal(size=(2, 4, 5, 5)))
        assert gradcheck(lambda: mse_loss(conv2d(x, k, bias), target), [x, k, bias], max_checks=10, rng=rng) < 1e-4

    def test_log(self, rng):
        x = DiffTensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
        target = DiffTensor(rng.normal(size=(3, 3)))
        assert gradcheck(lambda: mse_loss(log(x), target), [x]) < 1e-4


class TestLinearOperatorNode:
    """Tests for fixed linear maps."""

    def test_matrix_adjoint(self, rng):
        matrix = rng.normal(size=(4, 6))
        node = LinearOperatorNode(lambda x: x @ matrix, lambda y: y @ matrix.T, (4,), (6,), "m")
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(3, 6))
        assert dot_test(node.forward_map, node.adjoint_map, x, y) < 1e-12
        assert node.adjoint().in_shape == (6,)
        assert node.adjoint().name == "m^H"

    def test_apply_linear_gradient(self, rng):
        matrix = rng.normal(size=(4, 6))
        node = LinearOperatorNode(lambda x: x @ matrix, lambda y: y @ matrix.T, (4,), (6,), "m")
        x = leaf(rng, 2, 4)
        target = DiffTensor(rng.normal(size=(2, 6)))
        assert gradcheck(lambda: mse_loss(apply_linear(node, x), target), [x]) < 1e-4

    def test_apply_linear_shape_check(self, rng):
        with pytest.raises(ShapeError):
            apply_linear(LinearOperatorNode.identity((3,)), leaf(rng, 2, 4))

    def test_identity_and_zero(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(LinearOperatorNode.identity((3,)).forward_map(x), x)
        assert LinearOperatorNode.zero((3,), (5,)).forward_map(x).shape == (2, 5)

    def test_dot_test_detects_wrong_adjoint(self, rng):
        matrix = rng.normal(size=(4, 4))
        x, y = rng.normal(size=4), rng.normal(size=4)
        assert dot_test(lambda v: matrix @ v, lambda v: matrix @ v, x, y) > 1e-3

"""
Unit tests for mrfei.diagnostics module.
"""

import numpy as np
import pytest

from mrfei.diagnostics import GRADCHECK_TOLERANCE, TOY_SIZE, gradcheck_suite, toy_problem
from mrfei.nn import OutputMode


class TestToyProblem:
    """Tests for the toy NLEI setup."""

    def test_shapes(self):
        network, model, y_pairs, head_mask = toy_problem()
        assert network.mode is OutputMode.QMAP
        assert model.surrogate is not None and model.surrogate.frozen
        assert y_pairs.shape == (2, 2, model.op.m, model.op.T)
        assert head_mask.shape == (2, TOY_SIZE, TOY_SIZE)

    def test_seeded(self):
        a = toy_problem(seed=3)
        b = toy_problem(seed=3)
        assert a[0].params.digest() == b[0].params.digest()
        np.testing.assert_array_equal(a[2], b[2])


class TestGradcheckSuite:
    """Tests for gradcheck_suite."""

    @pytest.fixture(scope="class")
    def results(self) -> dict[str, float]:
        return gradcheck_suite(seed=0, max_checks=4)

    def test_covers_ops_and_losses(self, results):
        for name in ("conv2d", "apply_linear", "transform", "normal_operator", "loss_mc", "loss_ei"):
            assert name in results

    def test_ops_within_tolerance(self, results):
        worst = {name: err for name, err in results.items() if err > GRADCHECK_TOLERANCE}
        assert not worst

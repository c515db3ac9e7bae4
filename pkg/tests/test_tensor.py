"""
Tests für den Autodiff-Kern
"""

import os
import sys
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

# Füge Projektverzeichnis zum Pfad hinzu
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.tensor import (
    MASK_SENTINEL,
    Tensor,
    causal_mask,
    concat,
    detect_anomaly,
    get_default_dtype,
    log,
    masked_fill,
    matmul,
    no_grad,
    reduce_sum,
    set_default_dtype,
    softmax_last_axis,
    split,
    stack,
    unstack,
)
from tests.oracles import matmul_oracle, softmax_oracle
from utils.errors import ConfigurationError, ContractError, DimensionError, NumericError


class TestTensorOps(unittest.TestCase):
    """
    Tests für Vorwärts- und Rückwärtsdurchlauf einzelner Operationen
    """

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_matmul_matches_scalar_loops(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(a.tolist(), b.tolist()), atol=1e-12)

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 5)", str(ctx.exception))

    def test_broadcast_gradient_is_reduced(self):
        x = Tensor(self.rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(self.rng.normal(size=(4,)), requires_grad=True)
        reduce_sum(x + b).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_matmul_gradient(self):
        a = Tensor(self.rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(self.rng.normal(size=(3, 4)), requires_grad=True)
        reduce_sum(matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)), atol=1e-12)

    def test_gradients_accumulate_on_leaves(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        reduce_sum(x * 3.0).backward()
        reduce_sum(x * 3.0).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_repeated_index_accumulates(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        reduce_sum(x[np.array([0, 0, 2])]).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_graph_is_single_use(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = reduce_sum(x * x)
        loss.backward()
        with self.assertRaises(ContractError):
            loss.backward()

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(ContractError):
            (x * 2.0).backward()

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)
        self.assertIsNone(y.creator)

    def test_detect_anomaly_names_operation(self):
        with detect_anomaly(), np.errstate(invalid="ignore"):
            with self.assertRaises(NumericError) as ctx:
                log(Tensor(np.array([-1.0])))
        self.assertEqual(ctx.exception.op, "Log")


class TestSoftmaxAndMasks(unittest.TestCase):
    """
    Tests für Softmax, Masken und Sentinel
    """

    def test_softmax_matches_oracle(self):
        row = [0.3, -1.2, 2.5, 0.0]
        out = softmax_last_axis(Tensor(np.array([row])))
        np.testing.assert_allclose(out.data[0], softmax_oracle(row), atol=1e-15)

    def test_fully_masked_row_is_zero(self):
        scores = masked_fill(Tensor(np.ones((2, 3))), np.array([[True, True, True], [False, True, False]]),
                             MASK_SENTINEL)
        out = softmax_last_axis(scores)
        np.testing.assert_array_equal(out.data[0], np.zeros(3))
        np.testing.assert_allclose(out.data[1], [0.5, 0.0, 0.5])

    def test_sentinel_weight_underflows_to_zero(self):
        scores = masked_fill(Tensor(np.array([[50.0, 3.0]])), np.array([[True, False]]), MASK_SENTINEL)
        self.assertEqual(softmax_last_axis(scores).data[0, 0], 0.0)

    def test_masked_positions_receive_no_gradient(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        mask = np.array([[True, False], [False, False]])
        reduce_sum(masked_fill(x, mask, 0.0) * 5.0).backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 5.0], [5.0, 5.0]])

    def test_mask_must_broadcast(self):
        with self.assertRaises(DimensionError):
            masked_fill(Tensor(np.ones((2, 3))), np.ones((4, 3), dtype=bool), 0.0)

    def test_causal_mask(self):
        np.testing.assert_array_equal(causal_mask(3), [[False, True, True], [False, False, True],
                                                       [False, False, False]])

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                      elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, values):
        out = softmax_last_axis(Tensor(values))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        self.assertTrue(np.all(out.data >= 0.0))


class TestShapes(unittest.TestCase):
    """
    Tests für Verkettung, Aufteilung und Präzision
    """

    def test_split_concat_inverse(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4))
        parts = split(x, 2, axis=-1)
        np.testing.assert_array_equal(concat(parts, axis=-1).data, x.data)

    def test_unstack_stack_inverse(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4))
        np.testing.assert_array_equal(stack(unstack(x, axis=1), axis=1).data, x.data)

    def test_uneven_split_raises(self):
        with self.assertRaises(DimensionError):
            split(Tensor(np.ones((5,))), 2)

    def test_float32_precision(self):
        set_default_dtype("float32")
        self.assertEqual(Tensor([1.0]).data.dtype, np.float32)
        set_default_dtype("float64")
        self.assertIs(get_default_dtype(), np.float64)

    def test_unsupported_precision(self):
        with self.assertRaises(ConfigurationError):
            set_default_dtype("int32")


if __name__ == "__main__":
    unittest.main()

import math
import unittest

import numpy as np

from sargraph.core.autodiff import (Tape, add, dropout, dropout_mask, leaky_relu, log_softmax_nll, matmul,
                                    mul_scalar, relu, row_mask)
from sargraph.core.errors import ContractViolation, InputError

from .helpers import numeric_gradient


class TestTapeOps(unittest.TestCase):
    """Forward values and gradients of the tensor ops"""

    def test_matmul_identity_and_values(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
        eye = tape.leaf(np.eye(2))
        np.testing.assert_array_equal(matmul(tape, eye, x).value, x.value)
        ones = tape.leaf(np.ones((2, 1)))
        np.testing.assert_array_equal(matmul(tape, x, ones).value, [[3.0], [7.0]])

    def test_matmul_backward(self):
        tape = Tape()
        a = tape.leaf(np.array([[1.0, 2.0]]), "a")
        b = tape.leaf(np.array([[3.0], [4.0]]), "b")
        c = matmul(tape, a, b)
        tape.backward({c: np.ones((1, 1))})
        grads = tape.leaf_grads()
        np.testing.assert_array_equal(grads["a"], [[3.0, 4.0]])
        np.testing.assert_array_equal(grads["b"], [[1.0], [1.0]])

    def test_matmul_shape_mismatch(self):
        tape = Tape()
        with self.assertRaises(InputError):
            matmul(tape, tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))

    def test_values_keep_dtype_grads_are_f64(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 2), dtype=np.float32), "a")
        out = mul_scalar(tape, a, 3.0)
        self.assertEqual(out.value.dtype, np.float32)
        tape.backward({out: np.ones((2, 2))})
        self.assertEqual(tape.leaf_grads()["a"].dtype, np.float64)

    def test_activations(self):
        tape = Tape()
        x = tape.leaf(np.array([[-2.0, 3.0]]))
        self.assertAlmostEqual(float(leaky_relu(tape, x, 0.2).value[0, 0]), -0.4)
        tape = Tape()
        x = tape.leaf(np.array([[-1.0]]), "x")
        y = relu(tape, x)
        tape.backward({y: np.array([[5.0]])})
        self.assertEqual(float(tape.leaf_grads()["x"][0, 0]), 0.0)

    def test_shared_leaf_sums_both_paths(self):
        tape = Tape()
        x = tape.leaf(np.array([[2.0]]), "x")
        y = add(tape, mul_scalar(tape, x, 3.0), mul_scalar(tape, x, 4.0))
        tape.backward({y: np.ones((1, 1))})
        self.assertEqual(float(tape.leaf_grads()["x"][0, 0]), 7.0)

    def test_zero_seed(self):
        tape = Tape()
        w = tape.leaf(np.ones((2, 2)), "w")
        y = matmul(tape, tape.leaf(np.ones((1, 2))), w)
        tape.backward({y: np.zeros((1, 2))})
        np.testing.assert_array_equal(tape.leaf_grads()["w"], np.zeros((2, 2)))

    def test_seed_not_on_tape(self):
        tape = Tape()
        with tape.paused():
            x = tape.leaf(np.ones((1, 1)))
        with self.assertRaises(InputError):
            tape.backward({x: np.ones((1, 1))})

    def test_paused_records_nothing(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with tape.paused():
            relu(tape, x)
            self.assertFalse(tape.recording)
        self.assertTrue(tape.recording)
        self.assertEqual(len(tape), 1)

    def test_check_finite(self):
        tape = Tape(check_finite=True)
        x = tape.leaf(np.array([[np.inf]]))
        with self.assertRaises(ContractViolation):
            mul_scalar(tape, x, 0.0)

    def test_replay_is_deterministic(self):
        rng = np.random.default_rng(0)
        a_value, b_value = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))

        def run():
            tape = Tape()
            a, b = tape.leaf(a_value, "a"), tape.leaf(b_value, "b")
            out = relu(tape, matmul(tape, a, b))
            tape.backward({out: np.ones((4, 2))})
            return out.value, tape.leaf_grads()["a"]

        first, second = run(), run()
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])


class TestDetachedBoundary(unittest.TestCase):
    """The reverse sweep stops at detached leaves and resumes from the caller's seed"""

    def test_handoff(self):
        tape = Tape()
        w = tape.leaf(np.array([[2.0]]), "w")
        x = tape.leaf(np.array([[3.0]]))
        z = matmul(tape, x, w)
        acc = tape.detached_leaf(z.value * 10)
        loss = mul_scalar(tape, acc, 0.5)

        hit = tape.backward({loss: np.ones((1, 1))})
        self.assertIsNotNone(hit)
        var, grad = hit
        self.assertIs(var, acc)
        np.testing.assert_array_equal(grad, [[0.5]])

        # the caller routes the boundary gradient back to z
        self.assertIsNone(tape.backward({z: grad * 10}))
        np.testing.assert_array_equal(tape.leaf_grads()["w"], [[15.0]])

    def test_cannot_seed_behind_cursor(self):
        tape = Tape()
        x = tape.leaf(np.ones((1, 1)))
        acc = tape.detached_leaf(np.ones((1, 1)))
        out = mul_scalar(tape, acc, 2.0)
        tape.backward({out: np.ones((1, 1))})
        with self.assertRaises(ContractViolation):
            tape.backward({out: np.ones((1, 1))})
        self.assertIsNone(tape.backward({x: np.ones((1, 1))}))


class TestLoss(unittest.TestCase):
    """Masked softmax cross-entropy"""

    def test_uniform_logits(self):
        tape = Tape()
        loss = log_softmax_nll(tape, tape.leaf(np.zeros((1, 2))), np.array([0]), np.array([True]))
        self.assertAlmostEqual(float(loss.value[0, 0]), math.log(2))

    def test_large_logits_stay_finite(self):
        tape = Tape()
        loss = log_softmax_nll(tape, tape.leaf(np.array([[1000.0, 0.0]])), np.array([0]), np.array([True]))
        self.assertTrue(np.isfinite(loss.value).all())
        self.assertAlmostEqual(float(loss.value[0, 0]), 0.0)

    def test_mask_selects_confident_row(self):
        tape = Tape()
        logits = tape.leaf(np.array([[50.0, 0.0], [0.0, 0.0]]))
        loss = log_softmax_nll(tape, logits, np.array([0, 1]), np.array([True, False]))
        self.assertLess(float(loss.value[0, 0]), 1e-12)

    def test_empty_mask(self):
        tape = Tape()
        with self.assertRaises(InputError):
            log_softmax_nll(tape, tape.leaf(np.zeros((2, 2))), np.array([0, 1]), np.array([False, False]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        values = rng.standard_normal((5, 3))
        labels = np.array([0, 2, 1, 1, 0])
        mask = np.array([True, True, False, True, True])

        def loss_of(x):
            scratch = Tape()
            return float(log_softmax_nll(scratch, scratch.leaf(x), labels, mask, normalizer=7.0).value[0, 0])

        tape = Tape()
        logits = tape.leaf(values, "logits")
        loss = log_softmax_nll(tape, logits, labels, mask, normalizer=7.0)
        tape.backward({loss: np.ones((1, 1))})
        np.testing.assert_allclose(tape.leaf_grads()["logits"], numeric_gradient(loss_of, values), atol=1e-7)


class TestDropout(unittest.TestCase):
    """Counter-based dropout masks"""

    def test_zero_probability_is_identity(self):
        tape = Tape()
        x = tape.leaf(np.ones((3, 2)))
        self.assertIs(dropout(tape, x, 0.0, np.arange(3), seed=1, layer=1, epoch=0), x)

    def test_invalid_probability(self):
        tape = Tape()
        with self.assertRaises(InputError):
            dropout(tape, tape.leaf(np.ones((1, 1))), 1.0, np.arange(1), seed=1, layer=1, epoch=0)

    def test_mask_depends_on_node_not_position(self):
        full = dropout_mask(np.arange(10), 8, 0.5, seed=4, layer=2, epoch=3)
        subset = dropout_mask(np.array([7, 2]), 8, 0.5, seed=4, layer=2, epoch=3)
        np.testing.assert_array_equal(subset, full[[7, 2]])
        other_epoch = dropout_mask(np.arange(10), 8, 0.5, seed=4, layer=2, epoch=4)
        self.assertFalse(np.array_equal(full, other_epoch))

    def test_row_mask(self):
        tape = Tape()
        x = tape.leaf(np.ones((3, 2)), "x")
        y = row_mask(tape, x, np.array([True, False, True]))
        np.testing.assert_array_equal(y.value[:, 0], [1.0, 0.0, 1.0])
        tape.backward({y: np.ones((3, 2))})
        np.testing.assert_array_equal(tape.leaf_grads()["x"][:, 1], [1.0, 0.0, 1.0])


if __name__ == '__main__':
    unittest.main()

import math
import unittest

import numpy as np

from sargraph.core.errors import ContractViolation, InputError
from sargraph.layers.softmax import RunningSoftmaxState, running_softmax_fold, segment_softmax


class TestRunningSoftmax(unittest.TestCase):
    """Chunked, max-stabilized softmax-weighted sums"""

    def setUp(self):
        self.values = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
        self.logits = np.array([[0.0], [math.log(3.0)]])
        self.expected = (self.values[0] + 3 * self.values[1]) / 4

    def test_two_logits_one_chunk(self):
        state = running_softmax_fold(None, np.array([0, 0]), self.logits, self.values, num_dst=1)
        np.testing.assert_allclose(state.result()[0], self.expected)

    def test_two_logits_two_chunks(self):
        state = running_softmax_fold(None, np.array([0]), self.logits[:1], self.values[:1], num_dst=1)
        state = running_softmax_fold(state, np.array([0]), self.logits[1:], self.values[1:])
        np.testing.assert_allclose(state.result()[0], self.expected)

    def test_shift_invariance(self):
        state = RunningSoftmaxState(1, 1, 2)
        state.fold(np.array([0, 0]), self.logits + 1000.0, self.values)
        self.assertTrue(np.all(np.isfinite(state.numerator)))
        self.assertTrue(np.all(np.isfinite(state.denominator)))
        np.testing.assert_allclose(state.result()[0], self.expected)

    def test_chunking_invariance(self):
        rng = np.random.default_rng(0)
        dst = rng.integers(0, 6, size=50)
        logits = rng.standard_normal((50, 2)) * 5
        values = rng.standard_normal((50, 2, 3))
        reference = segment_softmax(dst, logits, 6)
        dense = np.zeros((6, 2, 3))
        np.add.at(dense, dst, reference[..., None] * values)
        for chunk in (1, 7, 50):
            state = RunningSoftmaxState(6, 2, 3)
            for start in range(0, 50, chunk):
                sl = slice(start, start + chunk)
                state.fold(dst[sl], logits[sl], values[sl])
            np.testing.assert_allclose(state.result(), dense, rtol=1e-12, atol=1e-12)

    def test_merge_disjoint_states(self):
        rng = np.random.default_rng(1)
        dst = np.array([0, 1, 0, 2, 1, 0])
        logits = rng.standard_normal((6, 1))
        values = rng.standard_normal((6, 1, 2))
        whole = RunningSoftmaxState(4, 1, 2).fold(dst, logits, values)
        left = RunningSoftmaxState(4, 1, 2).fold(dst[:3], logits[:3], values[:3])
        right = RunningSoftmaxState(4, 1, 2).fold(dst[3:], logits[3:], values[3:])
        np.testing.assert_allclose(left.merge(right).result(), whole.result(), rtol=1e-12)
        with self.assertRaises(InputError):
            left.merge(RunningSoftmaxState(3, 1, 2))

    def test_destination_without_edges(self):
        state = RunningSoftmaxState(3, 1, 2).fold(np.array([1]), np.array([[0.3]]), np.ones((1, 1, 2)))
        np.testing.assert_array_equal(state.result()[[0, 2]], np.zeros((2, 1, 2)))

    def test_non_finite_logits(self):
        with self.assertRaises(ContractViolation):
            RunningSoftmaxState(1, 1, 1).fold(np.array([0]), np.array([[np.nan]]), np.ones((1, 1, 1)))

    def test_new_state_needs_size(self):
        with self.assertRaises(InputError):
            running_softmax_fold(None, np.array([0]), np.zeros((1, 1)), np.ones((1, 1, 1)))


if __name__ == '__main__':
    unittest.main()

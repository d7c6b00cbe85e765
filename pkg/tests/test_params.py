import tempfile
import unittest
from pathlib import Path

import numpy as np

from sargraph.core.autodiff import Tape, matmul
from sargraph.core.errors import InputError
from sargraph.core.params import Adam, ParamStore, load_checkpoint, save_checkpoint


class TestParamStore(unittest.TestCase):
    """Named parameters, gradient accumulators and the tape binding"""

    def test_duplicate_name(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        with self.assertRaises(InputError):
            store.add("w", np.ones((2, 2)))

    def test_values_use_store_dtype(self):
        store = ParamStore(np.float32)
        store.glorot("w", 3, 4, np.random.default_rng(0))
        self.assertEqual(store["w"].dtype, np.float32)
        self.assertEqual(store.grad("w").dtype, np.float64)

    def test_bind_and_collect(self):
        store = ParamStore(np.float64)
        store.add("w", np.array([[2.0]]))
        tape = Tape()
        params = store.bind(tape)
        out = matmul(tape, tape.leaf(np.array([[3.0]])), params["w"])
        tape.backward({out: np.ones((1, 1))})
        store.collect(tape)
        store.collect(tape)
        self.assertEqual(float(store.grad("w")[0, 0]), 6.0)
        store.zero_grad()
        self.assertEqual(float(store.grad("w")[0, 0]), 0.0)

    def test_grad_shape_checked(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        with self.assertRaises(InputError):
            store.accumulate_grad("w", np.ones((1, 2)))


class TestAdam(unittest.TestCase):
    """Adam with step learning-rate decay"""

    def test_first_step_moves_by_lr(self):
        store = ParamStore(np.float64)
        store.add("w", np.array([[1.0, -1.0]]))
        store.set_grad("w", np.array([[0.5, -2.0]]))
        Adam(lr=0.1).step(store, epoch=0)
        np.testing.assert_allclose(store["w"], [[0.9, -0.9]], atol=1e-6)
        self.assertEqual(store.step, 1)

    def test_moments_after_one_step(self):
        store = ParamStore(np.float32)
        store.add("w", np.array([[1.0, -1.0]]))
        g = np.array([[0.5, -2.0]])
        store.set_grad("w", g)
        Adam(lr=0.1).step(store, epoch=0)
        first, second = store.moments("w")
        np.testing.assert_allclose(first, 0.1 * g)
        np.testing.assert_allclose(second, 0.001 * g * g)
        self.assertEqual(store["w"].dtype, np.float32)
        self.assertEqual(first.dtype, np.float64)

    def test_update_shape_checked(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        with self.assertRaises(InputError):
            store.update("w", np.ones((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)))

    def test_zero_lr_keeps_params(self):
        store = ParamStore(np.float32)
        store.add("w", np.array([[1.5]]))
        store.set_grad("w", np.array([[3.0]]))
        Adam(lr=0.0).step(store, epoch=0)
        self.assertEqual(float(store["w"][0, 0]), 1.5)

    def test_schedule(self):
        adam = Adam(lr=0.01, decay=0.3, step_size=30)
        self.assertEqual(adam.lr_at(29), 0.01)
        self.assertAlmostEqual(adam.lr_at(30), 0.003)
        self.assertAlmostEqual(adam.lr_at(65), 0.01 * 0.09)


class TestCheckpoint(unittest.TestCase):
    """SARF-per-tensor checkpoint directories"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "ckpt"

    def tearDown(self):
        self.tmp.cleanup()

    def _store(self):
        store = ParamStore(np.float32)
        store.glorot("layer1.W", 3, 2, np.random.default_rng(1))
        store.add("bn1.gamma", np.ones((1, 2)))
        return store

    def test_round_trip(self):
        store = self._store()
        store.set_grad("layer1.W", np.full((3, 2), 0.25))
        Adam(lr=0.05).step(store, epoch=0)
        buffers = {"bn1.running_mean": np.array([[0.5, -0.5]])}
        save_checkpoint(self.path, store, epoch=7, buffers=buffers)

        tensors, meta = load_checkpoint(self.path)
        self.assertEqual(meta, {"epoch": 7, "step": 1})
        np.testing.assert_array_equal(tensors["buffer.bn1.running_mean"], buffers["bn1.running_mean"])

        restored = self._store()
        restored.load_state(tensors, meta["step"])
        np.testing.assert_array_equal(restored["layer1.W"], store["layer1.W"])
        self.assertEqual(restored["layer1.W"].dtype, np.float32)
        self.assertEqual(restored.step, 1)
        index = (self.path / "index.txt").read_text().splitlines()
        self.assertEqual(index[:2], ["meta epoch 7", "meta step 1"])
        self.assertIn("param.layer1.W t0000.sarf 3 2 float32", index)

    def test_missing_index(self):
        with self.assertRaises(InputError):
            load_checkpoint(self.path)

    def test_missing_tensor(self):
        save_checkpoint(self.path, self._store(), epoch=1)
        tensors, meta = load_checkpoint(self.path)
        del tensors["adam_v.bn1.gamma"]
        with self.assertRaises(InputError):
            self._store().load_state(tensors, meta["step"])


if __name__ == '__main__':
    unittest.main()

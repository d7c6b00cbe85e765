import socket
import threading
import unittest

import numpy as np

from sargraph.core.errors import ProtocolError, TransportAbort
from sargraph.transport.base import Snapshot, accumulate_errors
from sargraph.transport.loopback import LoopbackHub
from sargraph.transport.tcp import TcpTransport, read_rankfile, resolve_rank
from sargraph.transport.wire import (HEADER_LEN, MessageKind, WireMessage, decode_message, encode_message,
                                     read_message)

from .helpers import run_workers


class TestWireCodec(unittest.TestCase):
    """Frame layout and decoding errors"""

    def test_feature_chunk(self):
        payload = np.arange(6, dtype=np.float32).reshape(2, 3)
        msg = WireMessage(MessageKind.FEATURE_CHUNK, layer=3, src=1, dst=2, payload=payload, seq=9)
        frame = encode_message(msg)
        self.assertEqual(frame[:4], b"SARW")
        self.assertEqual(len(frame), HEADER_LEN + 16 + payload.nbytes)
        decoded = decode_message(frame)
        self.assertEqual((decoded.kind, decoded.layer, decoded.src, decoded.dst, decoded.seq),
                         (MessageKind.FEATURE_CHUNK, 3, 1, 2, 9))
        self.assertEqual(decoded.payload.dtype, np.float32)
        np.testing.assert_array_equal(decoded.payload, payload)

    def test_empty_fetch_request(self):
        msg = WireMessage(MessageKind.FETCH_REQUEST, 1, 0, 1, np.zeros((0, 1), dtype=np.int64))
        decoded = decode_message(encode_message(msg))
        self.assertEqual(decoded.payload.shape, (0, 1))
        self.assertEqual(decoded.payload_bytes, 0)

    def test_text_payload(self):
        msg = WireMessage.text(MessageKind.ABORT, 0, 2, 0, "disk full")
        self.assertEqual(decode_message(encode_message(msg)).as_text(), "disk full")

    def test_kind_dtype_pairs_enforced(self):
        with self.assertRaises(ProtocolError):
            encode_message(WireMessage(MessageKind.FETCH_REQUEST, 0, 0, 1, np.zeros((2, 1), dtype=np.float32)))
        with self.assertRaises(ProtocolError):
            encode_message(WireMessage(MessageKind.GRAD_CHUNK, 0, 0, 1, np.zeros(3)))

    def test_corrupt_frames(self):
        frame = encode_message(WireMessage(MessageKind.GRAD_CHUNK, 0, 0, 1, np.ones((2, 2))))
        with self.assertRaises(ProtocolError):
            decode_message(b"XXXX" + frame[4:])
        with self.assertRaises(ProtocolError):
            decode_message(frame[:-3])
        with self.assertRaises(ProtocolError):
            decode_message(frame[:10])

    def test_random_frames(self):
        rng = np.random.default_rng(31)
        dtypes = {
            MessageKind.FETCH_REQUEST: [np.int64],
            MessageKind.FEATURE_CHUNK: [np.float32, np.float64],
            MessageKind.GRAD_CHUNK: [np.float32, np.float64],
            MessageKind.ALLREDUCE_CHUNK: [np.float32, np.float64],
            MessageKind.BARRIER: [np.uint8],
            MessageKind.ABORT: [np.uint8],
        }
        messages = []
        for _ in range(200):
            kind = MessageKind(int(rng.integers(1, len(MessageKind) + 1)))
            dtype = np.dtype(dtypes[kind][int(rng.integers(len(dtypes[kind])))])
            shape = (int(rng.integers(0, 20)), 1 if kind is MessageKind.FETCH_REQUEST else int(rng.integers(1, 9)))
            if dtype.kind == 'f':
                payload = rng.standard_normal(shape).astype(dtype)
            elif dtype == np.uint8:
                payload = rng.integers(0, 256, size=shape).astype(np.uint8)
            else:
                payload = rng.integers(-2 ** 40, 2 ** 40, size=shape, dtype=np.int64)
            messages.append(WireMessage(kind, int(rng.integers(0, 2 ** 32)), int(rng.integers(0, 256)),
                                        int(rng.integers(0, 256)), payload, int(rng.integers(0, 2 ** 32))))

        def same(left, right):
            self.assertEqual((left.kind, left.layer, left.src, left.dst, left.seq),
                             (right.kind, right.layer, right.src, right.dst, right.seq))
            self.assertEqual(left.payload.dtype, right.payload.dtype)
            np.testing.assert_array_equal(left.payload, right.payload)

        for msg in messages:
            same(decode_message(encode_message(msg)), msg)

        reader, writer = socket.socketpair()

        def send():
            with writer:
                writer.sendall(b"".join(encode_message(msg) for msg in messages))

        sender = threading.Thread(target=send, daemon=True)
        sender.start()
        try:
            for msg in messages:
                same(read_message(reader), msg)
            self.assertIsNone(read_message(reader))
        finally:
            sender.join(10)
            reader.close()

    def test_read_from_socket(self):
        left, right = socket.socketpair()
        try:
            payload = np.array([[1.5, -2.5]])
            left.sendall(encode_message(WireMessage(MessageKind.ALLREDUCE_CHUNK, 4, 1, 0, payload)))
            left.close()
            msg = read_message(right)
            np.testing.assert_array_equal(msg.payload, payload)
            self.assertIsNone(read_message(right))
        finally:
            right.close()


class TestErrorAccumulation(unittest.TestCase):
    """Row-compacted error messages summed in sender order"""

    def test_full_messages(self):
        total = accumulate_errors({1: np.array([[2.0, 3.0]]), 0: np.array([[1.0, 1.0]])}, (1, 2))
        np.testing.assert_array_equal(total, [[3.0, 4.0]])

    def test_compacted_rows(self):
        local = np.zeros((3, 1))
        total = accumulate_errors({0: local, 2: np.array([[5.0], [7.0]])}, (3, 1), {2: np.array([0, 2])})
        np.testing.assert_array_equal(total[:, 0], [5.0, 0.0, 7.0])

    def test_shape_mismatch(self):
        with self.assertRaises(ProtocolError):
            accumulate_errors({0: np.zeros((2, 2)), 1: np.zeros((3, 2))}, (2, 2))

    def test_snapshot_rejects_foreign_rows(self):
        snapshot = Snapshot(np.array([4, 9]), np.ones((2, 2)))
        np.testing.assert_array_equal(snapshot.rows(np.array([9])), [[1.0, 1.0]])
        self.assertEqual(snapshot.rows(np.array([], dtype=np.int64)).shape, (0, 2))
        with self.assertRaises(ProtocolError):
            snapshot.rows(np.array([5]))


class TestLoopbackTransport(unittest.TestCase):
    """In-process transport shared by worker threads"""

    def test_recv_errors_two_workers(self):
        def work(t):
            if t.rank == 0:
                return t.recv_errors(1, np.array([[1.0, 1.0]]), 2)
            t.send_error(0, 1, np.array([[2.0, 3.0]]))
            return None

        results = run_workers(2, work)
        np.testing.assert_array_equal(results[0], [[3.0, 4.0]])

    def test_duplicate_sender(self):
        hub = LoopbackHub(2, timeout=1.0)
        sender = hub.transport(1)
        sender.send_error(0, 1, np.ones((1, 1)))
        with self.assertRaises(ProtocolError):
            sender.send_error(0, 1, np.ones((1, 1)))

    def test_missing_sender_times_out(self):
        hub = LoopbackHub(2, timeout=0.2)
        with self.assertRaises(TransportAbort):
            hub.transport(0).recv_errors(1, np.zeros((1, 1)), 2)

    def test_allreduce(self):
        results = run_workers(4, lambda t: t.allreduce_sum([np.ones((2, 2)), np.full((1, 3), t.rank)]))
        for ones, ranks in results:
            np.testing.assert_array_equal(ones, np.full((2, 2), 4.0))
            np.testing.assert_array_equal(ranks, np.full((1, 3), 6.0))

    def test_allreduce_single_worker(self):
        values = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(LoopbackHub(1).transport(0).allreduce_sum([values])[0], values)

    def test_fetch_waits_for_publication(self):
        def work(t):
            if t.rank == 1:
                t.publish(5, np.array([2, 3]), np.array([[1.0], [2.0]]))
                t.barrier()
                return None
            rows = t.fetch_rows(1, 5, np.array([3, 2]))
            empty = t.fetch_rows(1, 5, np.array([], dtype=np.int64))
            t.barrier()
            return rows, empty

        rows, empty = run_workers(2, work)[0]
        np.testing.assert_array_equal(rows[:, 0], [2.0, 1.0])
        self.assertEqual(empty.nbytes, 0)

    def test_abort_wakes_waiters(self):
        def work(t):
            if t.rank == 1:
                t.abort("boom")
                return None
            t.recv_errors(1, np.zeros((1, 1)), 2)

        with self.assertRaises(TransportAbort):
            run_workers(2, work, timeout=5.0)


class TestTcpTransport(unittest.TestCase):
    """Two workers over localhost sockets"""

    def setUp(self):
        self.transports = [TcpTransport(rank, 2, ("127.0.0.1", 0), timeout=10.0) for rank in range(2)]
        addresses = {t.rank: t.address for t in self.transports}
        for t in self.transports:
            t.set_peers(addresses)

    def tearDown(self):
        for t in self.transports:
            t.close()

    def _run(self, work):
        results, errors = [None, None], []

        def run(t):
            try:
                results[t.rank] = work(t)
            except Exception as e:
                errors.append(e)
                t.abort(str(e))

        threads = [threading.Thread(target=run, args=(t,), daemon=True) for t in self.transports]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(20)
        if errors:
            raise errors[0]
        return results

    def test_fetch_errors_and_allreduce(self):
        def work(t):
            peer = 1 - t.rank
            t.publish(1, np.array([10 + t.rank]), np.full((1, 2), float(t.rank + 1), dtype=np.float32))
            rows = t.fetch_rows(peer, 1, np.array([10 + peer]))
            t.send_error(peer, 1, np.full((1, 2), 0.5 * (t.rank + 1), dtype=np.float32))
            error = t.recv_errors(1, np.zeros((1, 2)), 2)
            total = t.allreduce_sum([np.array([[t.rank + 1.0]]), np.ones((2, 2))])
            t.barrier()
            return rows, error, total

        first, second = self._run(work)
        np.testing.assert_array_equal(first[0], [[2.0, 2.0]])
        np.testing.assert_array_equal(second[0], [[1.0, 1.0]])
        np.testing.assert_array_equal(first[1], [[1.0, 1.0]])
        np.testing.assert_array_equal(second[1], [[0.5, 0.5]])
        for _, _, total in (first, second):
            self.assertEqual(float(total[0][0, 0]), 3.0)
            np.testing.assert_array_equal(total[1], np.full((2, 2), 2.0))

    def test_abort_reaches_peer(self):
        def work(t):
            if t.rank == 1:
                t.abort("worker crashed")
                return None
            t.recv_errors(1, np.zeros((1, 1)), 2)

        with self.assertRaises(TransportAbort):
            self._run(work)


class TestRankFiles(unittest.TestCase):
    """Rank-file parsing and environment overrides"""

    def test_read_and_override(self):
        import os
        import tempfile
        from unittest.mock import patch

        with tempfile.NamedTemporaryFile('w', suffix='.txt', delete=False) as f:
            f.write("# two workers\n0 127.0.0.1:7001\n1 localhost:7002\n")
        try:
            self.assertEqual(read_rankfile(f.name), {0: ("127.0.0.1", 7001), 1: ("localhost", 7002)})
            with patch.dict(os.environ, {"SARGRAPH_RANK": "1", "SARGRAPH_RANKFILE": f.name}):
                self.assertEqual(resolve_rank(0, None), (1, f.name))
        finally:
            os.unlink(f.name)


if __name__ == '__main__':
    unittest.main()

"""
TCP transport: one listening port per worker, length-prefixed frames.

Each worker keeps one outbound connection per peer for everything it sends
and reads every inbound connection on its own service thread. Fetch
responses are matched to requests by (peer, layer, seq).
"""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import itertools
import logging
import os
import socket
import threading
import time

import numpy as np

from ..core.errors import InputError, ProtocolError, TransportAbort
from .base import DEFAULT_TIMEOUT, Snapshot, Transport
from .wire import MessageKind, WireMessage, encode_message, read_message

logger = logging.getLogger(__name__)

Address = Tuple[str, int]

RANK_ENV = "SARGRAPH_RANK"
RANKFILE_ENV = "SARGRAPH_RANKFILE"


def read_rankfile(path: Union[str, Path]) -> Dict[int, Address]:
    """Lines of 'rank host:port'"""
    addresses = {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith('#'):
                    continue
                try:
                    rank_text, endpoint = line.split()
                    host, port = endpoint.rsplit(':', 1)
                    addresses[int(rank_text)] = (host, int(port))
                except ValueError as e:
                    raise InputError(f"{path}:{lineno}: expected 'rank host:port', got {line!r}") from e
    except OSError as e:
        raise InputError(f"Cannot read rank file {path}: {e}") from e
    if sorted(addresses) != list(range(len(addresses))):
        raise InputError(f"rank file {path} must list ranks 0..N-1 exactly once")
    return addresses


def resolve_rank(rank: Optional[int], rankfile: Optional[str]) -> Tuple[Optional[int], Optional[str]]:
    """Environment variables override the configured rank and rank file"""
    if os.environ.get(RANK_ENV):
        rank = int(os.environ[RANK_ENV])
    if os.environ.get(RANKFILE_ENV):
        rankfile = os.environ[RANKFILE_ENV]
    return rank, rankfile


class TcpTransport(Transport):
    def __init__(self, rank: int, world_size: int, listen: Address, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, world_size, timeout)
        self._cond = threading.Condition()
        self._snapshots: Dict[int, Snapshot] = {}
        self._responses: Dict[tuple, np.ndarray] = {}
        self._mail: Dict[int, Dict[int, np.ndarray]] = {}
        self._reduce_in: Dict[int, Dict[int, np.ndarray]] = {}
        self._reduce_out: Dict[int, np.ndarray] = {}
        self._barrier_in: Dict[int, set] = {}
        self._barrier_out: set = set()
        self._failure: Optional[Exception] = None
        self._round = 0
        self._barrier_round = 0
        self._seq = itertools.count()
        self._seq_lock = threading.Lock()
        self._peers: Dict[int, Address] = {}
        self._out: Dict[int, socket.socket] = {}
        self._out_locks = {peer: threading.Lock() for peer in range(world_size)}
        self._closing = False

        self._server = socket.create_server(listen)
        self.address: Address = self._server.getsockname()[:2]
        self._serve_pool = ThreadPoolExecutor(max_workers=2 * world_size + 2, thread_name_prefix=f"sar-serve-{rank}")
        self._accept_thread = threading.Thread(target=self._accept_loop, name=f"sar-accept-{rank}", daemon=True)
        self._accept_thread.start()
        logger.info(f"[rank {rank}] listening on {self.address[0]}:{self.address[1]}")

    def set_peers(self, addresses: Mapping[int, Address]) -> None:
        if len(addresses) != self.world_size:
            raise InputError(f"expected {self.world_size} peer addresses, got {len(addresses)}")
        self._peers = dict(addresses)

    # -- connection handling -------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._server.accept()
            except OSError:
                break
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"sar-read-{self.rank}").start()

    def _read_loop(self, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    msg = read_message(conn)
                except (OSError, TransportAbort) as e:
                    if not self._closing:
                        logger.warning(f"[rank {self.rank}] connection lost: {e}")
                    return
                except ProtocolError as e:
                    self._fail(e)
                    return
                if msg is None:
                    return
                self._dispatch(msg)

    def _connection(self, peer: int) -> socket.socket:
        sock = self._out.get(peer)
        if sock is not None:
            return sock
        if peer not in self._peers:
            raise InputError(f"no address known for rank {peer}")
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection(self._peers[peer], timeout=self.timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                break
            except OSError as e:
                if time.monotonic() > deadline:
                    raise TransportAbort(f"cannot reach rank {peer} at {self._peers[peer]}: {e}") from e
                time.sleep(0.05)
        self._out[peer] = sock
        return sock

    def _send(self, peer: int, msg: WireMessage) -> None:
        frame = encode_message(msg)
        with self._out_locks[peer]:
            try:
                self._connection(peer).sendall(frame)
            except OSError as e:
                raise TransportAbort(f"lost connection to rank {peer}: {e}") from e

    def _fail(self, error: Exception) -> None:
        with self._cond:
            if self._failure is None:
                self._failure = error
            self._cond.notify_all()

    def _wait_for(self, predicate: Callable[[], bool], what: str) -> None:
        deadline = time.monotonic() + self.timeout
        while not predicate():
            if self._failure is not None:
                raise self._failure
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportAbort(f"[rank {self.rank}] timed out after {self.timeout:.0f}s waiting for {what}")
            self._cond.wait(remaining)

    # -- inbound --------------------------------------------------------------

    def _dispatch(self, msg: WireMessage) -> None:
        kind = msg.kind
        if kind is MessageKind.FETCH_REQUEST:
            self._serve_pool.submit(self._serve_fetch, msg)
            return
        with self._cond:
            if kind is MessageKind.FEATURE_CHUNK:
                self._responses[(msg.src, msg.layer, msg.seq)] = msg.payload
            elif kind is MessageKind.GRAD_CHUNK:
                box = self._mail.setdefault(msg.layer, {})
                if msg.src in box:
                    self._failure = ProtocolError(f"rank {msg.src} sent two errors for layer {msg.layer}")
                box[msg.src] = msg.payload
            elif kind is MessageKind.ALLREDUCE_CHUNK:
                if self.rank == 0:
                    self._reduce_in.setdefault(msg.layer, {})[msg.src] = msg.payload
                else:
                    self._reduce_out[msg.layer] = msg.payload
            elif kind is MessageKind.BARRIER:
                if self.rank == 0:
                    self._barrier_in.setdefault(msg.layer, set()).add(msg.src)
                else:
                    self._barrier_out.add(msg.layer)
            elif kind is MessageKind.ABORT:
                reason = msg.as_text()
                logger.error(f"[rank {self.rank}] abort from rank {msg.src}: {reason}")
                if self._failure is None:
                    self._failure = TransportAbort(f"rank {msg.src} aborted: {reason}")
            self._cond.notify_all()

    def _serve_fetch(self, msg: WireMessage) -> None:
        try:
            with self._cond:
                self._wait_for(lambda: msg.layer in self._snapshots, f"layer {msg.layer} publication")
                snapshot = self._snapshots[msg.layer]
            rows = snapshot.rows(msg.payload.reshape(-1))
            self._send(msg.src, WireMessage(MessageKind.FEATURE_CHUNK, msg.layer, self.rank, msg.src, rows, msg.seq))
        except (ProtocolError, TransportAbort) as e:
            logger.error(f"[rank {self.rank}] failed to serve fetch from rank {msg.src}: {e}")
            self.abort(str(e))

    # -- Transport API ----------------------------------------------------------

    def publish(self, layer: int, global_ids: np.ndarray, matrix: np.ndarray) -> None:
        snapshot = Snapshot(global_ids, matrix)
        with self._cond:
            self._snapshots[layer] = snapshot
            self._cond.notify_all()

    def unpublish(self, layer: int) -> None:
        with self._cond:
            self._snapshots.pop(layer, None)

    def fetch_rows(self, peer: int, layer: int, row_ids: np.ndarray) -> np.ndarray:
        with self._seq_lock:
            seq = next(self._seq) & 0xFFFFFFFF
        ids = np.asarray(row_ids, dtype=np.int64).reshape(-1, 1)
        self._send(peer, WireMessage(MessageKind.FETCH_REQUEST, layer, self.rank, peer, ids, seq))
        key = (peer, layer, seq)
        with self._cond:
            self._wait_for(lambda: key in self._responses, f"rows of layer {layer} from rank {peer}")
            rows = self._responses.pop(key)
        if rows.shape[0] != len(ids):
            raise ProtocolError(f"rank {peer} returned {rows.shape[0]} rows for {len(ids)} requested")
        return rows

    def send_error(self, peer: int, layer: int, matrix: np.ndarray) -> None:
        self._send(peer, WireMessage(MessageKind.GRAD_CHUNK, layer, self.rank, peer, np.asarray(matrix)))

    def _collect_errors(self, layer: int, expected: int) -> Dict[int, np.ndarray]:
        with self._cond:
            self._wait_for(lambda: len(self._mail.get(layer, {})) >= expected,
                           f"{expected} error messages for layer {layer}")
            box = self._mail.pop(layer, {})
        if len(box) != expected:
            raise ProtocolError(f"expected {expected} error messages for layer {layer}, got {len(box)}")
        return {src: payload.astype(np.float64) for src, payload in box.items()}

    def allreduce_sum(self, buffers: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Gather to rank 0, sum in rank order, broadcast"""
        round_id = self._round
        self._round += 1
        shapes = [np.shape(b) for b in buffers]
        flat = np.concatenate([np.asarray(b, dtype=np.float64).ravel() for b in buffers]) if buffers \
            else np.zeros(0, dtype=np.float64)
        flat = flat.reshape(1, -1)

        if self.rank == 0:
            with self._cond:
                self._wait_for(lambda: len(self._reduce_in.get(round_id, {})) == self.world_size - 1,
                               f"allreduce round {round_id}")
                contributions = self._reduce_in.pop(round_id, {})
            contributions[0] = flat
            total = np.zeros(flat.shape, dtype=np.float64)
            for src in sorted(contributions):
                if contributions[src].shape != flat.shape:
                    raise ProtocolError(f"rank {src} allreduce payload shape {contributions[src].shape} "
                                        f"differs from {flat.shape}")
                total += contributions[src]
            for peer in range(1, self.world_size):
                self._send(peer, WireMessage(MessageKind.ALLREDUCE_CHUNK, round_id, 0, peer, total))
        else:
            self._send(0, WireMessage(MessageKind.ALLREDUCE_CHUNK, round_id, self.rank, 0, flat))
            with self._cond:
                self._wait_for(lambda: round_id in self._reduce_out, f"allreduce result {round_id}")
                total = self._reduce_out.pop(round_id)
            if total.shape != flat.shape:
                raise ProtocolError(f"allreduce result shape {total.shape} differs from {flat.shape}")

        results, offset = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            results.append(total[0, offset:offset + size].reshape(shape).copy())
            offset += size
        return results

    def barrier(self) -> None:
        round_id = self._barrier_round
        self._barrier_round += 1
        if self.rank == 0:
            with self._cond:
                self._wait_for(lambda: len(self._barrier_in.get(round_id, ())) == self.world_size - 1,
                               f"barrier {round_id}")
                self._barrier_in.pop(round_id, None)
            for peer in range(1, self.world_size):
                self._send(peer, WireMessage.text(MessageKind.BARRIER, round_id, 0, peer))
        else:
            self._send(0, WireMessage.text(MessageKind.BARRIER, round_id, self.rank, 0))
            with self._cond:
                self._wait_for(lambda: round_id in self._barrier_out, f"barrier {round_id}")
                self._barrier_out.discard(round_id)

    def abort(self, reason: str) -> None:
        self._fail(TransportAbort(f"rank {self.rank} aborted: {reason}"))
        for peer in range(self.world_size):
            if peer == self.rank or peer not in self._peers:
                continue
            try:
                self._send(peer, WireMessage.text(MessageKind.ABORT, 0, self.rank, peer, reason))
            except Exception as e:
                logger.debug(f"[rank {self.rank}] could not notify rank {peer} of abort: {e}")

    def close(self) -> None:
        self._closing = True
        try:
            self._server.close()
        except OSError:
            pass
        for sock in self._out.values():
            try:
                sock.close()
            except OSError:
                pass
        self._serve_pool.shutdown(wait=False)

"""
In-process transport: one thread per worker sharing a LoopbackHub.

All state lives in the hub behind one condition variable; payloads are
copied on the way in and out so workers never share mutable arrays.
"""
from typing import Callable, Dict, List, Optional, Sequence
import logging
import threading
import time

import numpy as np

from ..core.errors import ProtocolError, TransportAbort
from .base import DEFAULT_TIMEOUT, Snapshot, Transport, sum_in_rank_order

logger = logging.getLogger(__name__)


class LoopbackHub:
    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.world_size = world_size
        self.timeout = timeout
        self._cond = threading.Condition()
        self._snapshots: List[Dict[int, Snapshot]] = [{} for _ in range(world_size)]
        self._mail: Dict[tuple, Dict[int, np.ndarray]] = {}
        self._rounds: Dict[int, Dict[int, List[np.ndarray]]] = {}
        self._round_readers: Dict[int, int] = {}
        self._abort_reason: Optional[str] = None

    def transport(self, rank: int) -> "LoopbackTransport":
        return LoopbackTransport(self, rank)

    def transports(self) -> List["LoopbackTransport"]:
        return [self.transport(rank) for rank in range(self.world_size)]

    def abort(self, reason: str) -> None:
        with self._cond:
            if self._abort_reason is None:
                logger.error(f"Loopback job aborted: {reason}")
                self._abort_reason = reason
            self._cond.notify_all()

    def wait_for(self, predicate: Callable[[], bool], what: str) -> None:
        """Wait on the hub condition; caller holds the lock"""
        deadline = time.monotonic() + self.timeout
        while not predicate():
            if self._abort_reason is not None:
                raise TransportAbort(f"aborted while waiting for {what}: {self._abort_reason}")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportAbort(f"timed out after {self.timeout:.0f}s waiting for {what}")
            self._cond.wait(remaining)
        if self._abort_reason is not None:
            raise TransportAbort(f"aborted while waiting for {what}: {self._abort_reason}")


class LoopbackTransport(Transport):
    def __init__(self, hub: LoopbackHub, rank: int):
        super().__init__(rank, hub.world_size, hub.timeout)
        self.hub = hub
        self._round = 0

    def publish(self, layer: int, global_ids: np.ndarray, matrix: np.ndarray) -> None:
        snapshot = Snapshot(global_ids, matrix)
        with self.hub._cond:
            self.hub._snapshots[self.rank][layer] = snapshot
            self.hub._cond.notify_all()

    def unpublish(self, layer: int) -> None:
        with self.hub._cond:
            self.hub._snapshots[self.rank].pop(layer, None)

    def fetch_rows(self, peer: int, layer: int, row_ids: np.ndarray) -> np.ndarray:
        hub = self.hub
        with hub._cond:
            hub.wait_for(lambda: layer in hub._snapshots[peer], f"layer {layer} snapshot of rank {peer}")
            snapshot = hub._snapshots[peer][layer]
        return snapshot.rows(row_ids).copy()

    def send_error(self, peer: int, layer: int, matrix: np.ndarray) -> None:
        hub = self.hub
        with hub._cond:
            box = hub._mail.setdefault((peer, layer), {})
            if self.rank in box:
                raise ProtocolError(f"rank {self.rank} sent two errors to rank {peer} for layer {layer}")
            box[self.rank] = np.array(matrix, copy=True)
            hub._cond.notify_all()

    def _collect_errors(self, layer: int, expected: int) -> Dict[int, np.ndarray]:
        hub = self.hub
        key = (self.rank, layer)
        with hub._cond:
            hub.wait_for(lambda: len(hub._mail.get(key, {})) >= expected,
                         f"{expected} error messages for layer {layer}")
            box = hub._mail.pop(key, {})
        if len(box) != expected:
            raise ProtocolError(f"expected {expected} error messages for layer {layer}, got {len(box)}")
        return box

    def allreduce_sum(self, buffers: Sequence[np.ndarray]) -> List[np.ndarray]:
        hub = self.hub
        round_id = self._round
        self._round += 1
        with hub._cond:
            contributions = hub._rounds.setdefault(round_id, {})
            contributions[self.rank] = [np.array(b, dtype=np.float64, copy=True) for b in buffers]
            hub._cond.notify_all()
            hub.wait_for(lambda: len(hub._rounds[round_id]) == hub.world_size, f"allreduce round {round_id}")
            totals = sum_in_rank_order(hub._rounds[round_id])
            hub._round_readers[round_id] = hub._round_readers.get(round_id, 0) + 1
            if hub._round_readers[round_id] == hub.world_size:
                del hub._rounds[round_id]
                del hub._round_readers[round_id]
        return totals

    def abort(self, reason: str) -> None:
        self.hub.abort(f"rank {self.rank}: {reason}")

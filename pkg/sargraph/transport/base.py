from abc import ABC, abstractmethod
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np

from ..core.errors import ProtocolError

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0


class Snapshot:
    """Immutable per-layer feature rows a worker serves to its peers"""

    def __init__(self, global_ids: np.ndarray, matrix: np.ndarray):
        if len(global_ids) != matrix.shape[0]:
            raise ProtocolError("snapshot ids and rows disagree")
        self.global_ids = np.asarray(global_ids, dtype=np.int64)
        self.matrix = np.array(matrix, copy=True)
        self.matrix.setflags(write=False)

    def rows(self, requested: np.ndarray) -> np.ndarray:
        requested = np.asarray(requested, dtype=np.int64).reshape(-1)
        if len(requested) == 0:
            return np.zeros((0, self.matrix.shape[1]), dtype=self.matrix.dtype)
        idx = np.searchsorted(self.global_ids, requested)
        idx = np.minimum(idx, len(self.global_ids) - 1)
        if len(self.global_ids) == 0 or np.any(self.global_ids[idx] != requested):
            raise ProtocolError("fetch asked for rows this worker does not own")
        return self.matrix[idx]


def sum_in_rank_order(contributions: Dict[int, Sequence[np.ndarray]]) -> List[np.ndarray]:
    """Elementwise f64 sum of per-rank buffer lists, ranks ascending"""
    ranks = sorted(contributions)
    first = contributions[ranks[0]]
    totals = [np.zeros(np.shape(b), dtype=np.float64) for b in first]
    for rank in ranks:
        buffers = contributions[rank]
        if len(buffers) != len(totals):
            raise ProtocolError(f"rank {rank} contributed {len(buffers)} buffers, expected {len(totals)}")
        for total, buf in zip(totals, buffers):
            if np.shape(buf) != total.shape:
                raise ProtocolError(f"rank {rank} buffer shape {np.shape(buf)} differs from {total.shape}")
            total += np.asarray(buf, dtype=np.float64)
    return totals


def accumulate_errors(messages: Dict[int, np.ndarray], shape: Tuple[int, int],
                      rows_by_sender: Optional[Mapping[int, np.ndarray]] = None) -> np.ndarray:
    """
    E_p = sum over senders, ascending, into an f64 buffer.

    A sender listed in rows_by_sender contributes only those rows of E_p, in
    that order; every other sender contributes a full-shape matrix.
    """
    total = np.zeros(shape, dtype=np.float64)
    for sender in sorted(messages):
        part = np.asarray(messages[sender], dtype=np.float64)
        rows = None if rows_by_sender is None else rows_by_sender.get(sender)
        expected = total.shape if rows is None else (len(rows), total.shape[1])
        if part.shape != expected:
            raise ProtocolError(f"error from rank {sender} has shape {part.shape}, expected {expected}")
        if rows is None:
            total += part
        else:
            total[rows] += part
    return total


class Transport(ABC):
    """
    Point-to-point and collective operations between the workers of one job.

    Handles are thread-safe: the worker thread and its prefetch agent may
    call fetch_rows concurrently. Every blocking call honours `timeout`.
    """

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout

    @abstractmethod
    def publish(self, layer: int, global_ids: np.ndarray, matrix: np.ndarray) -> None:
        """Make this worker's rows for `layer` fetchable by peers"""

    @abstractmethod
    def unpublish(self, layer: int) -> None:
        """Drop a snapshot once no peer can still need it"""

    @abstractmethod
    def fetch_rows(self, peer: int, layer: int, row_ids: np.ndarray) -> np.ndarray:
        """Rows of peer's layer snapshot for the given global ids, in request order"""

    @abstractmethod
    def send_error(self, peer: int, layer: int, matrix: np.ndarray) -> None:
        """Send E_{rank -> peer} for layer"""

    @abstractmethod
    def _collect_errors(self, layer: int, expected: int) -> Dict[int, np.ndarray]:
        """Block until `expected` remote error messages for layer arrived"""

    @abstractmethod
    def allreduce_sum(self, buffers: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Elementwise sum over all workers, identical (f64) on every worker"""

    @abstractmethod
    def abort(self, reason: str) -> None:
        """Fail every blocked and future call on every worker"""

    def recv_errors(self, layer: int, local: np.ndarray, expected: int,
                    rows_by_sender: Optional[Mapping[int, np.ndarray]] = None) -> np.ndarray:
        """
        Accumulate `expected` contributions, the local one included, in ascending
        sender order into f64. rows_by_sender maps a peer to the local rows its
        (row-compacted) message covers.
        """
        messages = self._collect_errors(layer, expected - 1)
        if self.rank in messages:
            raise ProtocolError(f"rank {self.rank} received an error message from itself")
        messages[self.rank] = local
        return accumulate_errors(messages, np.shape(local), rows_by_sender)

    def barrier(self) -> None:
        self.allreduce_sum([])

    def close(self) -> None:
        pass

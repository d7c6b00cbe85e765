"""
Memory and communication accounting for one worker.

The memory ledger counts partition-sized feature blocks (the local partition
always counts as one) and live bytes per allocation tag. The comm ledger
counts payload bytes per epoch phase. Both are updated from the worker thread
and its prefetch agent, so every mutation holds a lock.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict
import logging
import threading

from ..core.errors import ContractViolation

logger = logging.getLogger(__name__)


class MemoryTag(str, Enum):
    LOCAL_FEATURES = "local-features"
    REMOTE_FEATURES = "remote-features"
    EDGE_COEFFICIENTS = "edge-coefficients"
    ACTIVATIONS = "activations"


class Phase(str, Enum):
    FWD_FEATURES = "fwd_feature_bytes"
    BWD_FEATURES = "bwd_feature_bytes"
    BWD_GRADIENTS = "bwd_gradient_bytes"
    ALLREDUCE = "allreduce_bytes"


class MemoryLedger:
    def __init__(self):
        self._lock = threading.Lock()
        self.resident_remote_blocks = 0
        self.peak_resident = 1
        self.bytes_by_tag: Dict[MemoryTag, int] = {tag: 0 for tag in MemoryTag}
        self.peak_bytes = 0
        self.peak_by_tag: Dict[MemoryTag, int] = {tag: 0 for tag in MemoryTag}
        self.blocks_acquired = 0
        self.blocks_released = 0

    @property
    def live_bytes(self) -> int:
        return sum(self.bytes_by_tag.values())

    def _charge(self, tag: MemoryTag, nbytes: int) -> None:
        self.bytes_by_tag[tag] += nbytes
        if self.bytes_by_tag[tag] < 0:
            raise ContractViolation(f"{tag.value} freed more bytes than it held")
        self.peak_by_tag[tag] = max(self.peak_by_tag[tag], self.bytes_by_tag[tag])
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def acquire_block(self, nbytes: int) -> None:
        """A remote feature block became resident"""
        with self._lock:
            self.resident_remote_blocks += 1
            self.blocks_acquired += 1
            self.peak_resident = max(self.peak_resident, self.resident_remote_blocks + 1)
            self._charge(MemoryTag.REMOTE_FEATURES, nbytes)

    def release_block(self, nbytes: int) -> None:
        with self._lock:
            if self.resident_remote_blocks == 0:
                raise ContractViolation("released a remote block that was never acquired")
            self.resident_remote_blocks -= 1
            self.blocks_released += 1
            self._charge(MemoryTag.REMOTE_FEATURES, -nbytes)

    def allocate(self, tag: MemoryTag, nbytes: int) -> None:
        with self._lock:
            self._charge(tag, nbytes)

    def free(self, tag: MemoryTag, nbytes: int) -> None:
        with self._lock:
            self._charge(tag, -nbytes)

    def reset_peaks(self) -> None:
        """Start a new epoch's peaks from what is live now"""
        with self._lock:
            self.peak_resident = self.resident_remote_blocks + 1
            self.peak_bytes = self.live_bytes
            self.peak_by_tag = dict(self.bytes_by_tag)
            self.blocks_acquired = self.resident_remote_blocks
            self.blocks_released = 0


class CommLedger:
    def __init__(self):
        self._lock = threading.Lock()
        self.counters: Dict[Phase, int] = {phase: 0 for phase in Phase}

    def add(self, phase: Phase, nbytes: int) -> None:
        with self._lock:
            self.counters[phase] += int(nbytes)

    def reset(self) -> None:
        with self._lock:
            self.counters = {phase: 0 for phase in Phase}

    @property
    def fwd_feature_bytes(self) -> int:
        return self.counters[Phase.FWD_FEATURES]

    @property
    def bwd_feature_bytes(self) -> int:
        return self.counters[Phase.BWD_FEATURES]

    @property
    def bwd_gradient_bytes(self) -> int:
        return self.counters[Phase.BWD_GRADIENTS]

    @property
    def allreduce_bytes(self) -> int:
        return self.counters[Phase.ALLREDUCE]

    def as_dict(self) -> Dict[str, int]:
        return {phase.value: count for phase, count in self.counters.items()}

    @property
    def total_feature_and_gradient_bytes(self) -> int:
        return (self.counters[Phase.FWD_FEATURES] + self.counters[Phase.BWD_FEATURES]
                + self.counters[Phase.BWD_GRADIENTS])


@dataclass
class LedgerReport:
    passed: bool
    peak_resident: int
    limit: int
    leaked_blocks: int
    message: str


def ledger_check(ledger: MemoryLedger, prefetch: bool) -> LedgerReport:
    """Residency bound at epoch end: 2 blocks without prefetch, 3 with"""
    limit = 3 if prefetch else 2
    leaked = ledger.resident_remote_blocks
    problems = []
    if ledger.peak_resident > limit:
        problems.append(f"peak residency {ledger.peak_resident} exceeds {limit}")
    if leaked:
        problems.append(f"{leaked} remote blocks never freed")
    message = "; ".join(problems) if problems else f"peak residency {ledger.peak_resident} <= {limit}"
    return LedgerReport(passed=not problems, peak_resident=ledger.peak_resident, limit=limit,
                        leaked_blocks=leaked, message=message)

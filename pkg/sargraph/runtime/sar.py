"""
Sequential aggregation and rematerialization.

sar_forward walks the shard blocks G_{p,0} .. G_{p,N-1} in order, fetching one
remote block at a time, folding it into the running aggregate with the tape
paused and freeing it before the block after next is requested. The result
enters the tape as a detached leaf. sar_backward walks the blocks again,
re-fetching remote features only when the aggregator's gradient depends on
them, sends every peer the error for the rows it provided, and returns the
accumulated error of the local rows for the tape to continue with.
"""
from abc import ABC, abstractmethod
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple
import logging

import numpy as np

from ..core.autodiff import Tape, Var
from ..core.errors import ContractViolation, InputError, ProtocolError
from ..core.params import ParamStore
from ..core.shards import ShardBlock
from ..transport.base import Transport
from .ledger import CommLedger, MemoryLedger, MemoryTag, Phase

logger = logging.getLogger(__name__)


class AggregateKind(str, Enum):
    SUM = "sum"
    MEAN = "mean"
    ATTENTION_SOFTMAX = "attention-softmax"
    RELATION_MEAN = "relation-mean"


class RematPolicy(str, Enum):
    SAR = "sar"
    RETAIN = "vanilla-dp"


@dataclass(frozen=True)
class AggregatorSpec:
    name: str
    needs_input_rematerialization: bool
    message_fn: str
    aggregate: AggregateKind
    has_theta: bool


@dataclass
class RetainedBlock:
    """What the vanilla-dp policy keeps from a forward block until backward"""
    z_src: Optional[np.ndarray]
    coefficients: Optional[np.ndarray]


@dataclass
class AggregationState:
    acc: Optional[np.ndarray] = None
    softmax_state: Optional[object] = None
    saved_local_z: Optional[np.ndarray] = None
    layer_id: int = 0
    acc_var: Optional[Var] = None
    extras: Dict[str, np.ndarray] = field(default_factory=dict)
    retained: Dict[int, RetainedBlock] = field(default_factory=dict)


class Aggregator(ABC):
    """Blockwise message construction and aggregation of one layer"""
    spec: AggregatorSpec

    def theta_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    @abstractmethod
    def init_state(self, local_z: np.ndarray) -> AggregationState:
        ...

    @abstractmethod
    def fold_block(self, state: AggregationState, block: ShardBlock, z_src: np.ndarray,
                   ledger: MemoryLedger, retain: bool) -> Optional[np.ndarray]:
        """Fold one block into state; returns coefficients worth retaining, if any"""

    @abstractmethod
    def finalize(self, state: AggregationState) -> np.ndarray:
        ...

    @abstractmethod
    def backward_block(self, state: AggregationState, block: ShardBlock, z_src: Optional[np.ndarray],
                       e_acc: np.ndarray, grads: Dict[str, np.ndarray], local_error: np.ndarray,
                       ledger: MemoryLedger, coefficients: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Error of the block's source rows (num_src x width, f64). Errors that land
        on the block's destination rows go into local_error, theta gradients
        into grads.
        """

    def finish_backward(self, state: AggregationState, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        return grads


@dataclass
class SarContext:
    """Everything one worker needs to run the SAR loops of one layer"""
    rank: int
    transport: Transport
    blocks: List[ShardBlock]
    owned: np.ndarray
    export_rows: List[np.ndarray]
    dtype: np.dtype
    ledger: MemoryLedger = field(default_factory=MemoryLedger)
    comm: CommLedger = field(default_factory=CommLedger)
    prefetch: bool = False
    policy: RematPolicy = RematPolicy.SAR

    @property
    def world_size(self) -> int:
        return len(self.blocks)

    @property
    def num_local(self) -> int:
        return int(len(self.owned))

    def local_rows(self, block: ShardBlock) -> np.ndarray:
        """Local row of every source of a block whose sources are local"""
        return np.searchsorted(self.owned, block.src_global_ids)

    def restricted(self, dst_mask_local: np.ndarray, export_rows: List[np.ndarray]) -> "SarContext":
        return replace(self, blocks=[b.restrict_to(dst_mask_local) for b in self.blocks], export_rows=export_rows)

    def with_ledgers(self, ledger: MemoryLedger, comm: CommLedger) -> "SarContext":
        return replace(self, ledger=ledger, comm=comm)


class BlockFetcher:
    """Yields (q, block, z_src) in block order, fetching with optional prefetch depth 1"""

    def __init__(self, ctx: SarContext, layer_id: int, phase: Phase, width: int):
        self.ctx = ctx
        self.layer_id = layer_id
        self.phase = phase
        self.width = width

    def _fetch(self, q: int) -> np.ndarray:
        block = self.ctx.blocks[q]
        rows = self.ctx.transport.fetch_rows(q, self.layer_id, block.src_global_ids)
        if rows.shape != (block.num_src, self.width):
            raise ProtocolError(f"rank {q} returned rows of shape {rows.shape} for layer {self.layer_id}, "
                                f"expected {(block.num_src, self.width)}")
        self.ctx.ledger.acquire_block(rows.nbytes)
        self.ctx.comm.add(self.phase, rows.nbytes)
        logger.debug(f"[rank {self.ctx.rank}] layer {self.layer_id}: fetched {block.num_src} rows from rank {q}")
        return rows

    def iterate(self, local_z: np.ndarray, fetch_remote: bool = True,
                release: bool = True) -> Iterator[Tuple[int, ShardBlock, Optional[np.ndarray]]]:
        ctx = self.ctx
        remote = [q for q, b in enumerate(ctx.blocks) if q != ctx.rank and b.num_src > 0] if fetch_remote else []
        pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"sar-prefetch-{ctx.rank}") \
            if ctx.prefetch and len(remote) > 1 else None
        pending: Dict[int, Future] = {}
        try:
            for q, block in enumerate(ctx.blocks):
                if q == ctx.rank:
                    yield q, block, local_z[ctx.local_rows(block)]
                    continue
                if q not in remote:
                    empty = np.zeros((0, self.width), dtype=local_z.dtype) if fetch_remote else None
                    yield q, block, empty
                    continue
                z_src = pending.pop(q).result() if q in pending else self._fetch(q)
                following = remote.index(q) + 1
                if pool is not None and following < len(remote):
                    pending[remote[following]] = pool.submit(self._fetch, remote[following])
                try:
                    yield q, block, z_src
                finally:
                    if release:
                        ctx.ledger.release_block(z_src.nbytes)
        finally:
            if pool is not None:
                for future in pending.values():
                    future.cancel()
                pool.shutdown(wait=True)


def sar_forward(layer_id: int, aggregator: Aggregator, local_z: np.ndarray, ctx: SarContext,
                tape: Tape, training: bool = True) -> AggregationState:
    """Aggregate over all shard blocks; state.acc_var is the detached leaf on the tape"""
    local_z = np.asarray(local_z)
    if local_z.ndim != 2 or local_z.shape[0] != ctx.num_local:
        raise InputError(f"layer {layer_id}: local z has shape {local_z.shape}, expected {ctx.num_local} rows")
    ctx.transport.publish(layer_id, ctx.owned, local_z)

    state = aggregator.init_state(local_z)
    state.layer_id = layer_id
    retain = training and ctx.policy is RematPolicy.RETAIN
    recorded = len(tape)
    with tape.paused():
        fetcher = BlockFetcher(ctx, layer_id, Phase.FWD_FEATURES, local_z.shape[1])
        for q, block, z_src in fetcher.iterate(local_z, release=not retain):
            coefficients = aggregator.fold_block(state, block, z_src, ctx.ledger, retain)
            if retain:
                kept = z_src if q != ctx.rank and block.num_src > 0 else None
                state.retained[q] = RetainedBlock(kept, coefficients)
        acc = aggregator.finalize(state)
    if len(tape) != recorded:
        raise ContractViolation(f"layer {layer_id}: the tape recorded ops during aggregation")

    state.acc = acc
    if training:
        state.saved_local_z = local_z
        ctx.ledger.allocate(MemoryTag.LOCAL_FEATURES, local_z.nbytes)
        ctx.ledger.allocate(MemoryTag.ACTIVATIONS, acc.nbytes)
    state.acc_var = tape.detached_leaf(acc.astype(ctx.dtype), name=f"acc{layer_id}")
    return state


def sar_backward(state: AggregationState, aggregator: Aggregator, e_acc: np.ndarray,
                 ctx: SarContext) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Return (E_p, theta gradients) for the layer whose forward produced state"""
    if state.saved_local_z is None:
        raise ContractViolation(f"layer {state.layer_id}: no saved local z, was the forward run in training mode?")
    e_acc = np.asarray(e_acc, dtype=np.float64)
    if e_acc.shape != state.acc.shape:
        raise InputError(f"layer {state.layer_id}: e_acc shape {e_acc.shape} differs from acc {state.acc.shape}")
    local_z = state.saved_local_z
    layer_id = state.layer_id
    grads = {name: np.zeros(shape, dtype=np.float64) for name, shape in aggregator.theta_shapes().items()}
    local_error = np.zeros(local_z.shape, dtype=np.float64)

    retained = state.retained
    refetch = aggregator.spec.needs_input_rematerialization and not retained
    fetcher = BlockFetcher(ctx, layer_id, Phase.BWD_FEATURES, local_z.shape[1])
    for q, block, z_src in fetcher.iterate(local_z, fetch_remote=refetch):
        coefficients = None
        kept = retained.pop(q, None)
        if kept is not None:
            coefficients = kept.coefficients
            if kept.z_src is not None:
                z_src = kept.z_src
        error = aggregator.backward_block(state, block, z_src, e_acc, grads, local_error, ctx.ledger, coefficients)
        if kept is not None and kept.z_src is not None:
            ctx.ledger.release_block(kept.z_src.nbytes)
        if q == ctx.rank:
            local_error[ctx.local_rows(block)] += error
        else:
            message = error.astype(ctx.dtype)
            ctx.transport.send_error(q, layer_id, message)
            ctx.comm.add(Phase.BWD_GRADIENTS, message.nbytes)
    grads = aggregator.finish_backward(state, grads)

    rows_by_sender = {q: rows for q, rows in enumerate(ctx.export_rows) if q != ctx.rank}
    e_local = ctx.transport.recv_errors(layer_id, local_error, ctx.world_size, rows_by_sender)
    ctx.transport.unpublish(layer_id)

    ctx.ledger.free(MemoryTag.LOCAL_FEATURES, local_z.nbytes)
    ctx.ledger.free(MemoryTag.ACTIVATIONS, state.acc.nbytes)
    state.saved_local_z = None
    return e_local, grads


def allreduce_param_grads(params: ParamStore, transport: Transport, comm: Optional[CommLedger] = None) -> None:
    """Every worker ends up holding the rank-ordered f64 sum of all gradients"""
    names = params.names()
    grads = [params.grad(name) for name in names]
    if comm is not None and transport.world_size > 1:
        comm.add(Phase.ALLREDUCE, sum(g.nbytes for g in grads))
    for name, total in zip(names, transport.allreduce_sum(grads)):
        params.set_grad(name, total)

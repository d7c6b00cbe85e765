from typing import Dict, Optional
import logging

import numpy as np

from ..core.autodiff import Tape, Var, add, matmul
from ..core.params import ParamStore
from ..core.shards import LocalDegrees, ShardBlock
from ..runtime.ledger import MemoryLedger
from ..runtime.sar import AggregateKind, AggregationState, Aggregator, AggregatorSpec

logger = logging.getLogger(__name__)

SAGE_SPEC = AggregatorSpec(
    name="sage-mean",
    needs_input_rematerialization=False,
    message_fn="copy-src",
    aggregate=AggregateKind.MEAN,
    has_theta=False,
)


def _inverse_degrees(degrees: np.ndarray) -> np.ndarray:
    """1/deg as a column, 0 for isolated nodes"""
    degrees = np.asarray(degrees, dtype=np.float64)
    inv = np.zeros(len(degrees), dtype=np.float64)
    np.divide(1.0, degrees, out=inv, where=degrees > 0)
    return inv[:, None]


class MeanAggregator(Aggregator):
    """Mean over the full in-neighborhood; the divisor is the global degree"""
    spec = SAGE_SPEC

    def __init__(self, degrees: np.ndarray):
        self.inv_degrees = _inverse_degrees(degrees)

    def init_state(self, local_z: np.ndarray) -> AggregationState:
        return AggregationState(acc=np.zeros(local_z.shape, dtype=np.float64))

    def fold_block(self, state: AggregationState, block: ShardBlock, z_src: np.ndarray,
                   ledger: MemoryLedger, retain: bool) -> Optional[np.ndarray]:
        if block.num_edges:
            np.add.at(state.acc, block.dst_index, np.asarray(z_src, dtype=np.float64)[block.src_index])
        return None

    def finalize(self, state: AggregationState) -> np.ndarray:
        return state.acc * self.inv_degrees

    def backward_block(self, state, block, z_src, e_acc, grads, local_error, ledger, coefficients=None):
        error = np.zeros((block.num_src, e_acc.shape[1]), dtype=np.float64)
        if block.num_edges:
            np.add.at(error, block.src_index, (e_acc * self.inv_degrees)[block.dst_index])
        return error


class GraphSageLayer:
    """h = act(h_prev W_res + mean_j (h_prev W)_j)"""

    def __init__(self, index: int, in_dim: int, out_dim: int, activation: str = "relu"):
        self.index = index
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = f"layer{index}.W"
        self.residual = f"layer{index}.W_res"

    @property
    def output_width(self) -> int:
        return self.out_dim

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.glorot(self.weight, self.in_dim, self.out_dim, rng)
        store.glorot(self.residual, self.in_dim, self.out_dim, rng)

    def transform(self, tape: Tape, h: Var, params: Dict[str, Var]) -> Var:
        return matmul(tape, h, params[self.weight])

    def aggregator(self, store: ParamStore, degrees: LocalDegrees, **options) -> MeanAggregator:
        return MeanAggregator(degrees.in_degrees)

    def combine(self, tape: Tape, h: Var, acc: Var, params: Dict[str, Var]) -> Var:
        return add(tape, matmul(tape, h, params[self.residual]), acc)

"""
Relational graph convolution with basis decomposition.

W_r = sum_b a_rb V_b. A node aggregates, per relation r, the mean of its
r-neighbors' features (over the full-graph relation degree) times W_r. The
messages are the raw layer inputs, so the backward needs them again for the
weight gradient.
"""
from typing import Dict, Iterator, List, Optional, Tuple
import logging

import numpy as np

from ..core.autodiff import Tape, Var, add, matmul
from ..core.errors import InputError
from ..core.params import ParamStore
from ..core.shards import LocalDegrees, ShardBlock
from ..runtime.ledger import MemoryLedger
from ..runtime.sar import AggregateKind, AggregationState, Aggregator, AggregatorSpec

logger = logging.getLogger(__name__)

RGCN_SPEC = AggregatorSpec(
    name="rgcn-relation-mean",
    needs_input_rematerialization=True,
    message_fn="relation-linear",
    aggregate=AggregateKind.RELATION_MEAN,
    has_theta=True,
)

_WEIGHT_GRAD = "_dW"


class RelationMeanAggregator(Aggregator):
    spec = RGCN_SPEC

    def __init__(self, bases: List[np.ndarray], coeffs: np.ndarray, relation_degrees: np.ndarray,
                 basis_names: List[str], coeff_name: str):
        self.bases = np.stack([np.asarray(b, dtype=np.float64) for b in bases])
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        if self.coeffs.shape != (relation_degrees.shape[1], len(bases)):
            raise InputError(f"coefficients must have shape (R, B) = {(relation_degrees.shape[1], len(bases))}, "
                             f"got {self.coeffs.shape}")
        self.weights = np.einsum('rb,bio->rio', self.coeffs, self.bases)
        self.relation_degrees = np.asarray(relation_degrees, dtype=np.float64)
        self.basis_names = basis_names
        self.coeff_name = coeff_name

    @property
    def num_relations(self) -> int:
        return self.weights.shape[0]

    def theta_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {name: self.bases.shape[1:] for name in self.basis_names}
        shapes[self.coeff_name] = self.coeffs.shape
        shapes[_WEIGHT_GRAD] = self.weights.shape
        return shapes

    def _relation_sums(self, block: ShardBlock, z_src: np.ndarray,
                       num_dst: int) -> Iterator[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
        """Per relation present in the block: (r, edge selector, scale column, normalized T_r)"""
        rel = block.relations()
        if len(rel) and rel.max() >= self.num_relations:
            raise InputError(f"relation id {int(rel.max())} >= num_relations {self.num_relations}")
        for r in np.unique(rel).tolist():
            degree = self.relation_degrees[:, r]
            scale = np.zeros(num_dst, dtype=np.float64)
            np.divide(1.0, degree, out=scale, where=degree > 0)
            sel = rel == r
            summed = None
            if z_src is not None:
                summed = np.zeros((num_dst, z_src.shape[1]), dtype=np.float64)
                np.add.at(summed, block.dst_index[sel], np.asarray(z_src, dtype=np.float64)[block.src_index[sel]])
                summed *= scale[:, None]
            yield r, sel, scale[:, None], summed

    def init_state(self, local_z: np.ndarray) -> AggregationState:
        return AggregationState(acc=np.zeros((len(local_z), self.weights.shape[2]), dtype=np.float64))

    def fold_block(self, state: AggregationState, block: ShardBlock, z_src: np.ndarray,
                   ledger: MemoryLedger, retain: bool) -> Optional[np.ndarray]:
        if block.num_edges:
            for r, _, _, normalized in self._relation_sums(block, z_src, len(state.acc)):
                state.acc += normalized @ self.weights[r]
        return None

    def finalize(self, state: AggregationState) -> np.ndarray:
        return state.acc

    def backward_block(self, state, block, z_src, e_acc, grads, local_error, ledger, coefficients=None):
        error = np.zeros((block.num_src, self.weights.shape[1]), dtype=np.float64)
        if block.num_edges == 0:
            return error
        for r, sel, scale, normalized in self._relation_sums(block, z_src, len(e_acc)):
            grads[_WEIGHT_GRAD][r] += normalized.T @ e_acc
            routed = (e_acc * scale) @ self.weights[r].T
            np.add.at(error, block.src_index[sel], routed[block.dst_index[sel]])
        return error

    def finish_backward(self, state: AggregationState, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        d_weights = grads.pop(_WEIGHT_GRAD)
        d_bases = np.einsum('rb,rio->bio', self.coeffs, d_weights)
        for b, name in enumerate(self.basis_names):
            grads[name] = d_bases[b]
        grads[self.coeff_name] = np.einsum('rio,bio->rb', d_weights, self.bases)
        return grads


class RGCNLayer:
    """h = act(sum_r mean_{j in N_r(i)} h_prev_j W_r [+ h_prev W_self])"""

    def __init__(self, index: int, in_dim: int, out_dim: int, num_relations: int,
                 num_bases: Optional[int] = None, self_weight: bool = False, activation: str = "elu"):
        self.index = index
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.num_relations = num_relations
        self.num_bases = num_bases or num_relations
        self.self_weight = self_weight
        self.activation = activation
        self.basis_names = [f"layer{index}.basis{b}" for b in range(self.num_bases)]
        self.coeff_name = f"layer{index}.coeffs"
        self.self_name = f"layer{index}.W_self"

    @property
    def output_width(self) -> int:
        return self.out_dim

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for name in self.basis_names:
            store.glorot(name, self.in_dim, self.out_dim, rng)
        store.glorot(self.coeff_name, self.num_relations, self.num_bases, rng)
        if self.self_weight:
            store.glorot(self.self_name, self.in_dim, self.out_dim, rng)

    def transform(self, tape: Tape, h: Var, params: Dict[str, Var]) -> Var:
        return h

    def aggregator(self, store: ParamStore, degrees: LocalDegrees, **options) -> RelationMeanAggregator:
        if degrees.relation_degrees.shape[1] != self.num_relations:
            raise InputError(f"graph has {degrees.relation_degrees.shape[1]} relations, "
                             f"layer {self.index} expects {self.num_relations}")
        return RelationMeanAggregator([store[name] for name in self.basis_names], store[self.coeff_name],
                                      degrees.relation_degrees, self.basis_names, self.coeff_name)

    def combine(self, tape: Tape, h: Var, acc: Var, params: Dict[str, Var]) -> Var:
        if not self.self_weight:
            return acc
        return add(tape, acc, matmul(tape, h, params[self.self_name]))

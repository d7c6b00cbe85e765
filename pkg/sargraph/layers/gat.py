"""
Graph attention with concatenated heads.

Per edge j -> i and head k: e = LeakyReLU(a_dst . z_i + a_src . z_j), the
softmax of e over the in-edges of i weights the sum of z_j. The attention
parameter has shape (H, 2F); its first F columns act on the destination.

The runtime aggregator folds edges through a RunningSoftmaxState, either a
chunk of at most `chunk_edges` edges at a time (fused) or a whole block at
once (unfused), and recomputes the coefficients block by block in backward.
gat_reference_forward/backward materialize every coefficient over the whole
graph and serve as the oracle.
"""
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple
import logging

import numpy as np

from ..core.autodiff import Tape, Var, matmul
from ..core.errors import InputError
from ..core.params import ParamStore
from ..core.shards import LocalDegrees, ShardBlock
from ..runtime.ledger import MemoryLedger, MemoryTag
from ..runtime.sar import AggregateKind, AggregationState, Aggregator, AggregatorSpec
from .softmax import RunningSoftmaxState, segment_softmax

logger = logging.getLogger(__name__)

GAT_SPEC = AggregatorSpec(
    name="gat-attention",
    needs_input_rematerialization=True,
    message_fn="attention",
    aggregate=AggregateKind.ATTENTION_SOFTMAX,
    has_theta=True,
)


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def _leaky_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, 1.0, slope)


def _coefficient_bytes(num_edges: int, heads: int) -> int:
    # logits plus exp-weights, f64
    return 2 * num_edges * heads * 8


class AttentionAggregator(Aggregator):
    spec = GAT_SPEC

    def __init__(self, attn: np.ndarray, heads: int, slope: float = 0.2,
                 chunk_edges: Optional[int] = None, attn_name: str = "attn"):
        attn = np.asarray(attn, dtype=np.float64)
        if attn.ndim != 2 or attn.shape[0] != heads or attn.shape[1] % 2:
            raise InputError(f"attention parameter must have shape (heads, 2F), got {attn.shape}")
        if chunk_edges is not None and chunk_edges < 1:
            raise InputError("chunk_edges must be positive")
        self.heads = heads
        self.width = attn.shape[1] // 2
        self.a_dst = attn[:, :self.width]
        self.a_src = attn[:, self.width:]
        self.slope = slope
        self.chunk_edges = chunk_edges
        self.attn_name = attn_name

    @property
    def fused(self) -> bool:
        return self.chunk_edges is not None

    def theta_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {self.attn_name: (self.heads, 2 * self.width)}

    def _split(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64).reshape(len(z), self.heads, self.width)

    def _chunks(self, num_edges: int) -> Iterator[slice]:
        step = self.chunk_edges or max(num_edges, 1)
        for start in range(0, num_edges, step):
            yield slice(start, min(start + step, num_edges))

    def init_state(self, local_z: np.ndarray) -> AggregationState:
        z = self._split(local_z)
        state = AggregationState(softmax_state=RunningSoftmaxState(len(z), self.heads, self.width))
        state.extras["z"] = z
        state.extras["s_dst"] = np.einsum('nhf,hf->nh', z, self.a_dst)
        return state

    def fold_block(self, state: AggregationState, block: ShardBlock, z_src: np.ndarray,
                   ledger: MemoryLedger, retain: bool) -> Optional[np.ndarray]:
        if block.num_edges == 0:
            return None
        z_src = self._split(z_src)
        s_src = np.einsum('shf,hf->sh', z_src, self.a_src)
        s_dst = state.extras["s_dst"]
        keep = retain and not self.fused
        kept = []
        for sl in self._chunks(block.num_edges):
            dst, src = block.dst_index[sl], block.src_index[sl]
            nbytes = _coefficient_bytes(len(dst), self.heads)
            ledger.allocate(MemoryTag.EDGE_COEFFICIENTS, nbytes)
            pre = s_dst[dst] + s_src[src]
            state.softmax_state.fold(dst, _leaky(pre, self.slope), z_src[src])
            if keep:
                kept.append(pre)
            else:
                ledger.free(MemoryTag.EDGE_COEFFICIENTS, nbytes)
        return np.concatenate(kept) if keep else None

    def finalize(self, state: AggregationState) -> np.ndarray:
        out = state.softmax_state.result()
        state.extras["out"] = out
        return out.reshape(len(out), self.heads * self.width)

    def backward_block(self, state, block, z_src, e_acc, grads, local_error, ledger, coefficients=None):
        error = np.zeros((block.num_src, self.heads, self.width), dtype=np.float64)
        if block.num_edges == 0:
            return error.reshape(block.num_src, -1)
        z_src = self._split(z_src)
        z_dst = state.extras["z"]
        out = state.extras["out"]
        softmax = state.softmax_state
        g = e_acc.reshape(len(e_acc), self.heads, self.width)
        dz_dst = local_error.reshape(len(local_error), self.heads, self.width)
        s_src = np.einsum('shf,hf->sh', z_src, self.a_src)
        d_attn = grads[self.attn_name]

        for sl in self._chunks(block.num_edges):
            dst, src = block.dst_index[sl], block.src_index[sl]
            if coefficients is not None:
                pre = coefficients[sl]
            else:
                ledger.allocate(MemoryTag.EDGE_COEFFICIENTS, _coefficient_bytes(len(dst), self.heads))
                pre = state.extras["s_dst"][dst] + s_src[src]
            e = _leaky(pre, self.slope)
            alpha = np.exp(e - softmax.max[dst]) / softmax.denominator[dst]
            g_dst = g[dst]
            z_j = z_src[src]
            d_alpha = np.einsum('chf,chf->ch', g_dst, z_j)
            d_e = alpha * (d_alpha - np.einsum('chf,chf->ch', g_dst, out[dst]))
            d_pre = d_e * _leaky_grad(pre, self.slope)
            np.add.at(error, src, alpha[..., None] * g_dst + d_pre[..., None] * self.a_src[None])
            np.add.at(dz_dst, dst, d_pre[..., None] * self.a_dst[None])
            d_attn[:, :self.width] += np.einsum('ch,chf->hf', d_pre, z_dst[dst])
            d_attn[:, self.width:] += np.einsum('ch,chf->hf', d_pre, z_j)
            ledger.free(MemoryTag.EDGE_COEFFICIENTS, _coefficient_bytes(len(dst), self.heads))
        return error.reshape(block.num_src, -1)


@dataclass
class GatReferenceCache:
    z: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    pre: np.ndarray
    alpha: np.ndarray
    out: np.ndarray
    attn: np.ndarray
    slope: float


def gat_reference_forward(z: np.ndarray, attn: np.ndarray, src: np.ndarray, dst: np.ndarray,
                          num_nodes: int, slope: float = 0.2) -> Tuple[np.ndarray, GatReferenceCache]:
    """Two-step attention: all coefficients first, then the weighted sum"""
    attn = np.asarray(attn, dtype=np.float64)
    heads, width = attn.shape[0], attn.shape[1] // 2
    z3 = np.asarray(z, dtype=np.float64).reshape(len(z), heads, width)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    pre = np.einsum('ehf,hf->eh', z3[dst], attn[:, :width]) + np.einsum('ehf,hf->eh', z3[src], attn[:, width:])
    alpha = segment_softmax(dst, _leaky(pre, slope), num_nodes) if len(dst) else np.zeros((0, heads))
    out = np.zeros((num_nodes, heads, width), dtype=np.float64)
    np.add.at(out, dst, alpha[..., None] * z3[src])
    cache = GatReferenceCache(z3, src, dst, pre, alpha, out, attn, slope)
    return out.reshape(num_nodes, heads * width), cache


def gat_reference_backward(cache: GatReferenceCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (dz, dattn) for the upstream gradient of gat_reference_forward's output"""
    z3, src, dst, alpha = cache.z, cache.src, cache.dst, cache.alpha
    n, heads, width = z3.shape
    g = np.asarray(grad_out, dtype=np.float64).reshape(n, heads, width)
    dz = np.zeros(z3.shape, dtype=np.float64)
    dattn = np.zeros(cache.attn.shape, dtype=np.float64)
    if len(dst) == 0:
        return dz.reshape(n, -1), dattn

    np.add.at(dz, src, alpha[..., None] * g[dst])
    d_alpha = np.einsum('ehf,ehf->eh', g[dst], z3[src])
    weighted = np.zeros((n, heads), dtype=np.float64)
    np.add.at(weighted, dst, alpha * d_alpha)
    d_e = alpha * (d_alpha - weighted[dst])
    d_pre = d_e * _leaky_grad(cache.pre, cache.slope)
    a_dst, a_src = cache.attn[:, :width], cache.attn[:, width:]
    np.add.at(dz, dst, d_pre[..., None] * a_dst[None])
    np.add.at(dz, src, d_pre[..., None] * a_src[None])
    dattn[:, :width] = np.einsum('eh,ehf->hf', d_pre, z3[dst])
    dattn[:, width:] = np.einsum('eh,ehf->hf', d_pre, z3[src])
    return dz.reshape(n, -1), dattn


class GATLayer:
    """h = act(attention-weighted sum of (h_prev W)_j), heads concatenated, no bias"""

    def __init__(self, index: int, in_dim: int, out_dim: int, heads: int = 1, slope: float = 0.2,
                 activation: str = "elu"):
        self.index = index
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        self.slope = slope
        self.activation = activation
        self.weight = f"layer{index}.W"
        self.attention = f"layer{index}.attn"

    @property
    def output_width(self) -> int:
        return self.heads * self.out_dim

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.glorot(self.weight, self.in_dim, self.heads * self.out_dim, rng)
        store.glorot(self.attention, self.heads, 2 * self.out_dim, rng)

    def transform(self, tape: Tape, h: Var, params: Dict[str, Var]) -> Var:
        return matmul(tape, h, params[self.weight])

    def aggregator(self, store: ParamStore, degrees: LocalDegrees, fused: bool = True,
                   chunk_edges: int = 256, **options) -> AttentionAggregator:
        return AttentionAggregator(store[self.attention], self.heads, self.slope,
                                   chunk_edges if fused else None, attn_name=self.attention)

    def combine(self, tape: Tape, h: Var, acc: Var, params: Dict[str, Var]) -> Var:
        return acc

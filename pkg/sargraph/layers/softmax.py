"""
Streaming, numerically stable softmax-weighted sums per destination.

Logits arrive in arbitrary chunks of edges. The state keeps a running max per
destination and head; when a larger logit shows up, the accumulated numerator
and denominator are rescaled by exp(old_max - new_max).
"""
from typing import Optional
import logging

import numpy as np

from ..core.errors import ContractViolation, InputError

logger = logging.getLogger(__name__)


class RunningSoftmaxState:
    """Running max (n, H), numerator (n, H, F) and denominator (n, H), all f64"""

    def __init__(self, num_dst: int, heads: int, width: int):
        self.max = np.full((num_dst, heads), -np.inf, dtype=np.float64)
        self.numerator = np.zeros((num_dst, heads, width), dtype=np.float64)
        self.denominator = np.zeros((num_dst, heads), dtype=np.float64)

    @property
    def shape(self):
        return self.numerator.shape

    def _rescale(self, new_max: np.ndarray) -> None:
        # rows still at -inf hold nothing, so any finite scale works
        with np.errstate(invalid='ignore'):
            scale = np.exp(self.max - new_max)
        scale = np.where(np.isneginf(self.max), 0.0, scale)
        self.numerator *= scale[..., None]
        self.denominator *= scale
        self.max = new_max

    def fold(self, dst: np.ndarray, logits: np.ndarray, values: np.ndarray) -> "RunningSoftmaxState":
        """
        Fold one chunk of edges: dst (E,), logits (E, H), values (E, H, F).
        """
        logits = np.asarray(logits, dtype=np.float64)
        if len(dst) == 0:
            return self
        if not np.all(np.isfinite(logits)):
            raise ContractViolation(f"non-finite attention logits in a chunk of {len(dst)} edges")
        chunk_max = np.full(self.max.shape, -np.inf)
        np.maximum.at(chunk_max, dst, logits)
        self._rescale(np.maximum(self.max, chunk_max))
        weights = np.exp(logits - self.max[dst])
        np.add.at(self.numerator, dst, weights[..., None] * np.asarray(values, dtype=np.float64))
        np.add.at(self.denominator, dst, weights)
        return self

    def merge(self, other: "RunningSoftmaxState") -> "RunningSoftmaxState":
        """Combine two partial states over disjoint edge sets"""
        if other.shape != self.shape:
            raise InputError(f"cannot merge softmax states of shapes {self.shape} and {other.shape}")
        new_max = np.maximum(self.max, other.max)
        with np.errstate(invalid='ignore'):
            other_scale = np.where(np.isneginf(other.max), 0.0, np.exp(other.max - new_max))
        self._rescale(new_max)
        self.numerator += other.numerator * other_scale[..., None]
        self.denominator += other.denominator * other_scale
        return self

    def result(self) -> np.ndarray:
        """numerator / denominator; destinations without edges get 0"""
        out = np.zeros(self.numerator.shape, dtype=np.float64)
        has = self.denominator > 0
        out[has] = self.numerator[has] / self.denominator[has][:, None]
        return out


def running_softmax_fold(state: Optional[RunningSoftmaxState], dst: np.ndarray, logits: np.ndarray,
                         values: np.ndarray, num_dst: Optional[int] = None) -> RunningSoftmaxState:
    if state is None:
        if num_dst is None:
            raise InputError("num_dst is required to start a new softmax state")
        values = np.asarray(values)
        state = RunningSoftmaxState(num_dst, values.shape[1], values.shape[2])
    return state.fold(np.asarray(dst, dtype=np.int64), logits, values)


def segment_softmax(dst: np.ndarray, logits: np.ndarray, num_dst: int) -> np.ndarray:
    """Materialized per-destination softmax over edges (E, H) -> (E, H)"""
    logits = np.asarray(logits, dtype=np.float64)
    seg_max = np.full((num_dst, logits.shape[1]), -np.inf)
    np.maximum.at(seg_max, dst, logits)
    weights = np.exp(logits - seg_max[dst])
    totals = np.zeros(seg_max.shape)
    np.add.at(totals, dst, weights)
    return weights / totals[dst]

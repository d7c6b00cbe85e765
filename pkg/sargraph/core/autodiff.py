"""
Dense 2-D tensor ops on numpy arrays and a reverse-mode tape.

Values keep the run's dtype (f32 or f64); every op computes in f64 and
rounds the result, and all gradients are f64. A DetachedLeaf node marks the
place where the SAR runtime, not the tape, propagates gradients: the reverse
sweep stops there and hands the accumulated gradient to the caller.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from .errors import ContractViolation, InputError

logger = logging.getLogger(__name__)

F64 = np.float64


class NodeKind(str, Enum):
    LEAF = "leaf"
    OP = "op"
    DETACHED = "detached"


class Var:
    """A value recorded (or not) on a tape"""
    __slots__ = ("id", "value", "name")

    def __init__(self, vid: int, value: np.ndarray, name: Optional[str] = None):
        self.id = vid
        self.value = value
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.value.shape}, name={self.name})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    kind: NodeKind
    op: str
    inputs: Tuple[int, ...]
    output: int
    backward: Optional[BackwardFn] = None
    saved: Dict[str, object] = field(default_factory=dict)


class Tape:
    """Append-only op record; backward sweeps it in strict reverse order"""

    def __init__(self, check_finite: bool = False):
        self.nodes: List[TapeNode] = []
        self.check_finite = check_finite
        self._vars: Dict[int, Var] = {}
        self._position: Dict[int, int] = {}
        self._leaf_names: Dict[int, str] = {}
        self._grads: Dict[int, np.ndarray] = {}
        self._recording = True
        self._cursor: Optional[int] = None
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def recording(self) -> bool:
        return self._recording

    @contextmanager
    def paused(self) -> Iterator[None]:
        """Ops run but nothing is recorded (SAR aggregation, inference)"""
        previous = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = previous

    def _new_var(self, value: np.ndarray, name: Optional[str] = None) -> Var:
        var = Var(self._next_id, value, name)
        self._next_id += 1
        return var

    def _append(self, node: TapeNode, var: Var) -> None:
        self._position[var.id] = len(self.nodes)
        self._vars[var.id] = var
        self.nodes.append(node)

    def leaf(self, value: np.ndarray, name: Optional[str] = None) -> Var:
        """Register a leaf; named leaves collect gradients for the caller"""
        var = self._new_var(value, name)
        if not self._recording:
            return var
        self._append(TapeNode(NodeKind.LEAF, "leaf", (), var.id), var)
        if name is not None:
            self._leaf_names[var.id] = name
        return var

    def detached_leaf(self, value: np.ndarray, name: Optional[str] = None) -> Var:
        """Boundary whose gradient is exposed to, and continued by, the caller"""
        var = self._new_var(value, name)
        if self._recording:
            self._append(TapeNode(NodeKind.DETACHED, "detached", (), var.id), var)
        return var

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray,
               backward: BackwardFn, saved: Optional[Dict[str, object]] = None) -> Var:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise ContractViolation(f"non-finite values produced by {op}")
        var = self._new_var(value)
        if self._recording:
            node = TapeNode(NodeKind.OP, op, tuple(v.id for v in inputs), var.id, backward, saved or {})
            self._append(node, var)
        return var

    def backward(self, seeds: Mapping[Union[Var, int], np.ndarray]) -> Optional[Tuple[Var, np.ndarray]]:
        """
        Continue the reverse sweep from where it last stopped.

        Returns (detached var, its gradient) when a DetachedLeaf is reached, or
        None once the start of the tape is passed.
        """
        start = len(self.nodes) - 1 if self._cursor is None else self._cursor
        for key, grad in seeds.items():
            vid = key.id if isinstance(key, Var) else int(key)
            if vid not in self._position:
                raise InputError(f"cannot seed var {vid}: it is not on the tape")
            if self._position[vid] > start:
                raise ContractViolation(f"var {vid} was already passed by the backward sweep")
            self._accumulate(vid, grad)

        for idx in range(start, -1, -1):
            node = self.nodes[idx]
            if node.kind is NodeKind.DETACHED:
                self._cursor = idx - 1
                var = self._vars[node.output]
                grad = self._grads.pop(node.output, None)
                if grad is None:
                    grad = np.zeros(var.shape, dtype=F64)
                return var, grad
            if node.kind is NodeKind.LEAF:
                continue
            grad = self._grads.pop(node.output, None)
            if grad is None:
                continue
            for vid, input_grad in zip(node.inputs, node.backward(grad)):
                if input_grad is not None:
                    self._accumulate(vid, input_grad)
        self._cursor = -1
        return None

    def _accumulate(self, vid: int, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=F64)
        expected = self._vars[vid].shape
        if grad.shape != expected:
            raise InputError(f"gradient shape {grad.shape} does not match var shape {expected}")
        if vid in self._grads:
            self._grads[vid] = self._grads[vid] + grad
        else:
            self._grads[vid] = grad.copy()

    def grad(self, var: Var) -> np.ndarray:
        grad = self._grads.get(var.id)
        return np.zeros(var.shape, dtype=F64) if grad is None else grad

    def leaf_grads(self) -> Dict[str, np.ndarray]:
        """Gradients of the named leaves, zeros where no path reached them"""
        return {name: self.grad(self._vars[vid]) for vid, name in self._leaf_names.items()}


def _rounded(value64: np.ndarray, like: np.ndarray) -> np.ndarray:
    return value64.astype(like.dtype, copy=False)


def _f64(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=F64)


def matmul(tape: Tape, a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InputError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    a64, b64 = _f64(a.value), _f64(b.value)
    value = _rounded(a64 @ b64, a.value)

    def backward(g):
        return g @ b64.T, a64.T @ g

    return tape.record("matmul", (a, b), value, backward)


def add(tape: Tape, a: Var, b: Var) -> Var:
    """Elementwise sum; b may be a 1-row vector broadcast over a's rows"""
    row_broadcast = b.shape[0] == 1 and a.shape[0] != 1
    if a.shape[1] != b.shape[1] or (b.shape[0] != a.shape[0] and not row_broadcast):
        raise InputError(f"add shape mismatch: {a.shape} + {b.shape}")
    value = _rounded(_f64(a.value) + _f64(b.value), a.value)

    def backward(g):
        return g, (g.sum(axis=0, keepdims=True) if row_broadcast else g)

    return tape.record("add", (a, b), value, backward)


def mul_scalar(tape: Tape, a: Var, c: float) -> Var:
    value = _rounded(_f64(a.value) * c, a.value)
    return tape.record("mul_scalar", (a,), value, lambda g: (g * c,))


def relu(tape: Tape, x: Var) -> Var:
    x64 = _f64(x.value)
    value = _rounded(np.maximum(x64, 0.0), x.value)
    # derivative at exactly 0 takes the positive branch
    return tape.record("relu", (x,), value, lambda g: (g * (x64 >= 0),))


def leaky_relu(tape: Tape, x: Var, slope: float) -> Var:
    x64 = _f64(x.value)
    value = _rounded(np.where(x64 >= 0, x64, slope * x64), x.value)
    return tape.record("leaky_relu", (x,), value, lambda g: (g * np.where(x64 >= 0, 1.0, slope),))


def elu(tape: Tape, x: Var, alpha: float = 1.0) -> Var:
    x64 = _f64(x.value)
    neg = alpha * np.expm1(np.minimum(x64, 0.0))
    value = _rounded(np.where(x64 > 0, x64, neg), x.value)
    return tape.record("elu", (x,), value, lambda g: (g * np.where(x64 >= 0, 1.0, neg + alpha),))


def activation(tape: Tape, x: Var, kind: str, slope: float = 0.01) -> Var:
    if kind == "relu":
        return relu(tape, x)
    if kind == "elu":
        return elu(tape, x)
    if kind == "leaky_relu":
        return leaky_relu(tape, x, slope)
    if kind == "identity":
        return x
    raise InputError(f"unknown activation {kind!r}")


def dropout_mask(row_ids: np.ndarray, cols: int, p: float, seed: int, layer: int, epoch: int) -> np.ndarray:
    """
    Keep-mask from a counter-based generator keyed by (seed, layer, epoch).

    Row r draws from Philox with counter word 1 set to its global node id, so
    a node gets the same mask however the graph is partitioned.
    """
    key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | ((layer & 0xFFFFFFFF) << 32) | (epoch & 0xFFFFFFFF)
    mask = np.empty((len(row_ids), cols), dtype=bool)
    for row, gid in enumerate(np.asarray(row_ids, dtype=np.int64).tolist()):
        gen = np.random.Generator(np.random.Philox(key=key, counter=gid << 64))
        mask[row] = gen.random(cols) >= p
    return mask


def dropout(tape: Tape, x: Var, p: float, row_ids: np.ndarray, seed: int, layer: int, epoch: int) -> Var:
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout p must lie in [0, 1), got {p}")
    if p == 0.0:
        return x
    scale = np.where(dropout_mask(row_ids, x.shape[1], p, seed, layer, epoch), 1.0 / (1.0 - p), 0.0)
    value = _rounded(_f64(x.value) * scale, x.value)
    return tape.record("dropout", (x,), value, lambda g: (g * scale,))


def row_mask(tape: Tape, x: Var, rows: np.ndarray) -> Var:
    """Zero every row not set in the boolean mask"""
    keep = np.asarray(rows, dtype=F64).reshape(-1, 1)
    value = _rounded(_f64(x.value) * keep, x.value)
    return tape.record("row_mask", (x,), value, lambda g: (g * keep,))


def log_softmax_nll(tape: Tape, logits: Var, labels: np.ndarray, mask: np.ndarray,
                    normalizer: Optional[float] = None) -> Var:
    """
    Summed negative log-likelihood over masked rows divided by normalizer.

    normalizer defaults to the number of masked rows (the mean); distributed
    callers pass the global count so that per-worker losses add up.
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if normalizer is None:
        if count == 0:
            raise InputError("loss mask selects no rows")
        normalizer = float(count)
    if normalizer <= 0:
        raise InputError("loss normalizer must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[1]
    picked = labels[mask]
    if len(picked) and (picked.min() < 0 or picked.max() >= num_classes):
        raise InputError("masked rows carry labels outside [0, num_classes)")

    z = _f64(logits.value)[mask]
    shifted = z - z.max(axis=1, keepdims=True) if len(z) else z
    log_norm = np.log(np.exp(shifted).sum(axis=1)) if len(z) else np.zeros(0)
    nll = log_norm - shifted[np.arange(len(z)), picked]
    value = np.array([[nll.sum() / normalizer]], dtype=F64)

    def backward(g):
        grad = np.zeros(logits.shape, dtype=F64)
        if len(z):
            probs = np.exp(shifted - log_norm[:, None])
            probs[np.arange(len(z)), picked] -= 1.0
            grad[mask] = probs * (g[0, 0] / normalizer)
        return (grad,)

    return tape.record("log_softmax_nll", (logits,), value, backward)

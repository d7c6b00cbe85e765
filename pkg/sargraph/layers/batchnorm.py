"""
BatchNorm over rows spread across workers.

Forward all-reduces per-column (sum x, sum x^2, row count) and normalizes with
the global mean and population variance. Backward all-reduces the two
column sums the input gradient needs, so every worker's rows get the gradient
a single-machine BatchNorm over the concatenated rows would give them.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple
import logging

import numpy as np

from ..core.autodiff import Tape, Var
from ..core.errors import InputError
from ..core.params import ParamStore
from ..runtime.ledger import CommLedger, Phase
from ..transport.base import Transport

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.9


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    count: float


@dataclass
class BatchNormState:
    """Parameter names, running statistics and the local row count of one BatchNorm"""
    gamma_name: str
    beta_name: str
    width: int
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    local_rows: int = 0

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros((1, self.width), dtype=np.float64)
        if self.running_var is None:
            self.running_var = np.ones((1, self.width), dtype=np.float64)

    def init_params(self, store: ParamStore) -> None:
        store.add(self.gamma_name, np.ones((1, self.width)))
        store.add(self.beta_name, np.zeros((1, self.width)))

    def buffers(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}

    def load_buffers(self, prefix: str, tensors: Dict[str, np.ndarray]) -> None:
        try:
            self.running_mean = np.asarray(tensors[f"{prefix}.running_mean"], dtype=np.float64)
            self.running_var = np.asarray(tensors[f"{prefix}.running_var"], dtype=np.float64)
        except KeyError as e:
            raise InputError(f"checkpoint is missing {e.args[0]}") from e


def _allreduce(transport: Optional[Transport], buffers, comm: Optional[CommLedger]):
    if transport is None:
        return [np.asarray(b, dtype=np.float64) for b in buffers]
    if comm is not None and transport.world_size > 1:
        comm.add(Phase.ALLREDUCE, sum(np.asarray(b, dtype=np.float64).nbytes for b in buffers))
    return transport.allreduce_sum(buffers)


def dist_batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, transport: Optional[Transport],
                           eps: float = DEFAULT_EPS, comm: Optional[CommLedger] = None
                           ) -> Tuple[np.ndarray, BatchNormCache, np.ndarray, np.ndarray]:
    """Return (y, cache, global mean, global population variance), all f64"""
    x = np.asarray(x, dtype=np.float64)
    total, squares, count = _allreduce(
        transport, [x.sum(axis=0, keepdims=True), (x * x).sum(axis=0, keepdims=True),
                    np.array([[float(len(x))]])], comm)
    n = float(count[0, 0])
    if n < 1:
        raise InputError("batchnorm over zero rows")
    mean = total / n
    var = np.maximum(squares / n - mean * mean, 0.0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    gamma = np.asarray(gamma, dtype=np.float64)
    y = xhat * gamma + np.asarray(beta, dtype=np.float64)
    return y, BatchNormCache(xhat, inv_std, gamma, n), mean, var


def dist_batchnorm_backward(cache: BatchNormCache, grad: np.ndarray, transport: Optional[Transport],
                            comm: Optional[CommLedger] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dgamma, dbeta); dgamma and dbeta are this worker's partial sums"""
    grad = np.asarray(grad, dtype=np.float64)
    d_xhat = grad * cache.gamma
    sum_d, sum_dx = _allreduce(transport, [d_xhat.sum(axis=0, keepdims=True),
                                           (d_xhat * cache.xhat).sum(axis=0, keepdims=True)], comm)
    dx = (d_xhat - sum_d / cache.count - cache.xhat * sum_dx / cache.count) * cache.inv_std
    d_gamma = (grad * cache.xhat).sum(axis=0, keepdims=True)
    d_beta = grad.sum(axis=0, keepdims=True)
    return dx, d_gamma, d_beta


def dist_batchnorm(tape: Tape, x: Var, gamma: Var, beta: Var, state: BatchNormState,
                   transport: Optional[Transport], training: bool = True,
                   comm: Optional[CommLedger] = None) -> Var:
    """Tape op; in inference mode it applies the running statistics without communicating"""
    state.local_rows = x.shape[0]
    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        y = (np.asarray(x.value, dtype=np.float64) - state.running_mean) * inv_std
        y = y * np.asarray(gamma.value, dtype=np.float64) + np.asarray(beta.value, dtype=np.float64)
        return tape.record("batchnorm_eval", (x, gamma, beta), y.astype(x.value.dtype),
                           lambda g: (g * inv_std * np.asarray(gamma.value, dtype=np.float64), None, None))

    y, cache, mean, var = dist_batchnorm_forward(x.value, gamma.value, beta.value, transport, state.eps, comm)
    state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean
    state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var

    def backward(g):
        return dist_batchnorm_backward(cache, g, transport, comm)

    return tape.record("batchnorm", (x, gamma, beta), y.astype(x.value.dtype), backward)

from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union
import logging

import numpy as np

from .autodiff import Tape, Var
from .errors import InputError
from .io import read_sarf, write_sarf

logger = logging.getLogger(__name__)

INDEX_FILE = "index.txt"


class ParamStore:
    """Named parameters with f64 gradient accumulators and Adam moments"""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._grads: Dict[str, np.ndarray] = {}
        self._first: Dict[str, np.ndarray] = {}
        self._second: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params:
            raise InputError(f"parameter {name!r} registered twice")
        value = np.array(value, dtype=self.dtype, ndmin=2)
        self._params[name] = value
        self._grads[name] = np.zeros(value.shape, dtype=np.float64)
        self._first[name] = np.zeros(value.shape, dtype=np.float64)
        self._second[name] = np.zeros(value.shape, dtype=np.float64)
        return value

    def glorot(self, name: str, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
        limit = np.sqrt(6.0 / (rows + cols))
        return self.add(name, rng.uniform(-limit, limit, size=(rows, cols)))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> Tuple[str, ...]:
        return tuple(self._params)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._params.items())

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_grad(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self._params[name].shape:
            raise InputError(f"gradient for {name!r} has shape {grad.shape}, expected {self._params[name].shape}")
        self._grads[name] = np.asarray(grad, dtype=np.float64)

    def accumulate_grad(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self._params[name].shape:
            raise InputError(f"gradient for {name!r} has shape {grad.shape}, expected {self._params[name].shape}")
        self._grads[name] = self._grads[name] + grad

    def moments(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Adam first and second moments of one parameter (f64)"""
        return self._first[name], self._second[name]

    def update(self, name: str, value: np.ndarray, first: np.ndarray, second: np.ndarray) -> None:
        """Replace a parameter, cast to the store dtype, together with its moments"""
        if value.shape != self._params[name].shape:
            raise InputError(f"update for {name!r} has shape {value.shape}, expected {self._params[name].shape}")
        self._params[name] = np.asarray(value).astype(self.dtype)
        self._first[name] = np.asarray(first, dtype=np.float64)
        self._second[name] = np.asarray(second, dtype=np.float64)

    def zero_grad(self) -> None:
        for name in self._grads:
            self._grads[name] = np.zeros_like(self._grads[name])

    def bind(self, tape: Tape) -> Dict[str, Var]:
        """Register every parameter as a named leaf of the tape"""
        return {name: tape.leaf(value, name) for name, value in self._params.items()}

    def collect(self, tape: Tape) -> None:
        """Add the tape's leaf gradients into the accumulators"""
        for name, grad in tape.leaf_grads().items():
            if name in self._params:
                self.accumulate_grad(name, grad)

    def state(self) -> Dict[str, np.ndarray]:
        tensors = {}
        for name, value in self._params.items():
            tensors[f"param.{name}"] = value
            tensors[f"adam_m.{name}"] = self._first[name]
            tensors[f"adam_v.{name}"] = self._second[name]
        return tensors

    def load_state(self, tensors: Mapping[str, np.ndarray], step: int) -> None:
        for name in self._params:
            try:
                value = tensors[f"param.{name}"]
                first = tensors[f"adam_m.{name}"]
                second = tensors[f"adam_v.{name}"]
            except KeyError as e:
                raise InputError(f"checkpoint is missing {e.args[0]}") from e
            if value.shape != self._params[name].shape:
                raise InputError(f"checkpoint shape mismatch for {name!r}")
            self._params[name] = value.astype(self.dtype)
            self._first[name] = first.astype(np.float64)
            self._second[name] = second.astype(np.float64)
        self.step = step


class Adam:
    """Adam with step decay: lr * decay ** (epoch // step_size)"""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 decay: float = 0.3, step_size: int = 30):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.step_size = step_size

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.step_size)

    def step(self, store: ParamStore, epoch: int) -> None:
        store.step += 1
        t = store.step
        lr = self.lr_at(epoch)
        for name in store.names():
            g = store.grad(name)
            first, second = store.moments(name)
            m = self.beta1 * first + (1.0 - self.beta1) * g
            v = self.beta2 * second + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            updated = store[name].astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            store.update(name, updated, m, v)


def save_checkpoint(path: Union[str, Path], store: ParamStore, epoch: int,
                    buffers: Optional[Mapping[str, np.ndarray]] = None) -> Path:
    """
    One SARF file per tensor plus index.txt.

    index.txt: 'meta epoch <e>' and 'meta step <t>' lines, then one
    '<name> <file> <rows> <cols> <dtype>' line per tensor.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = dict(store.state())
    for name, value in (buffers or {}).items():
        tensors[f"buffer.{name}"] = value
    lines = [f"meta epoch {epoch}", f"meta step {store.step}"]
    for i, (name, value) in enumerate(tensors.items()):
        filename = f"t{i:04d}.sarf"
        value = np.asarray(value)
        write_sarf(path / filename, value)
        lines.append(f"{name} {filename} {value.shape[0]} {value.shape[1]} {value.dtype.name}")
    with open(path / INDEX_FILE, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Checkpoint with {len(tensors)} tensors written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, int]]:
    """Return (tensors by name, meta values)"""
    path = Path(path)
    index = path / INDEX_FILE
    if not index.exists():
        raise InputError(f"no checkpoint index at {index}")
    tensors, meta = {}, {}
    with open(index, 'r', encoding='utf-8') as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "meta":
                meta[parts[1]] = int(parts[2])
                continue
            name, filename, rows, cols, _ = parts
            value = read_sarf(path / filename)
            if value.shape != (int(rows), int(cols)):
                raise InputError(f"checkpoint tensor {name!r} has shape {value.shape}, index says {rows}x{cols}")
            tensors[name] = value
    return tensors, meta

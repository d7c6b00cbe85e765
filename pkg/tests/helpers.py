"""Shared fixtures: finite differences, thread-per-worker runners and small jobs"""
import socket
import threading
from typing import Callable, List, Optional

import numpy as np

from sargraph.api.models import LayerConfig, TrainConfig
from sargraph.core.graph import Graph
from sargraph.core.partition import PartitionMap, partition_balanced
from sargraph.core.synthetic import SyntheticGraph
from sargraph.runtime.worker import JobData
from sargraph.transport.loopback import LoopbackHub, LoopbackTransport


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function over every entry of x (f64)"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        saved = x[idx]
        x[idx] = saved + eps
        plus = f(x)
        x[idx] = saved - eps
        minus = f(x)
        x[idx] = saved
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def run_workers(world_size: int, target: Callable[[LoopbackTransport], object],
                timeout: float = 30.0) -> List[object]:
    """Run target(transport) on one thread per rank; re-raise the first failure"""
    hub = LoopbackHub(world_size, timeout)
    results: List[Optional[object]] = [None] * world_size
    errors = []

    def run(rank):
        try:
            results[rank] = target(hub.transport(rank))
        except BaseException as e:
            errors.append(e)
            hub.abort(str(e))

    threads = [threading.Thread(target=run, args=(rank,), daemon=True) for rank in range(world_size)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout + 5)
    if errors:
        raise errors[0]
    return results


def contiguous_partition(num_nodes: int, n_parts: int) -> PartitionMap:
    """Node v goes to part v * n_parts // num_nodes"""
    assignment = (np.arange(num_nodes) * n_parts) // num_nodes
    return PartitionMap(assignment=assignment.astype(np.int64), num_parts=n_parts)


def job_data(synth: SyntheticGraph, n_parts: int, seed: int = 0, train_fraction: float = 0.6) -> JobData:
    graph: Graph = synth.graph
    n = graph.num_nodes
    order = np.random.default_rng(seed + 7).permutation(n)
    cut = int(n * train_fraction)
    val_cut = cut + (n - cut) // 2
    return JobData(
        graph=graph,
        features=synth.features,
        labels=synth.labels,
        partition=partition_balanced(graph, n_parts, seed),
        train_nodes=np.sort(order[:cut]),
        val_nodes=np.sort(order[cut:val_cut]),
        test_nodes=np.sort(order[val_cut:]),
    )


def sage_stack(in_dim: int, hidden: int, classes: int, num_layers: int = 3, batchnorm: bool = False,
               dropout: float = 0.0) -> List[LayerConfig]:
    dims = [in_dim] + [hidden] * (num_layers - 1) + [classes]
    return [
        LayerConfig(type="sage", in_dim=dims[i], out_dim=dims[i + 1],
                    batchnorm=batchnorm and i < num_layers - 1,
                    dropout=dropout if i < num_layers - 1 else 0.0)
        for i in range(num_layers)
    ]


def train_config(layers: List[LayerConfig], **overrides) -> TrainConfig:
    values = dict(layers=layers, epochs=5, lr=0.01, seed=3, evaluate=False, timeout=60.0)
    values.update(overrides)
    return TrainConfig(**values)


def free_ports(count: int) -> List[int]:
    """Distinct localhost ports that were free a moment ago"""
    sockets = [socket.create_server(("127.0.0.1", 0)) for _ in range(count)]
    try:
        return [s.getsockname()[1] for s in sockets]
    finally:
        for s in sockets:
            s.close()

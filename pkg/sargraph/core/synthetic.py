"""
Seeded synthetic graphs for tests and benchmarks.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union
import logging

import numpy as np

from .errors import InputError
from .graph import Graph, build_csr
from .io import write_edge_list, write_labels, write_sarf

logger = logging.getLogger(__name__)


@dataclass
class SyntheticGraph:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray

    def write(self, directory: Union[str, Path]) -> Dict[str, Path]:
        """Write graph.txt, features.sarf and labels.sarf; return their paths"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "graph": directory / "graph.txt",
            "features": directory / "features.sarf",
            "labels": directory / "labels.sarf",
        }
        write_edge_list(paths["graph"], self.graph)
        write_sarf(paths["features"], self.features)
        write_labels(paths["labels"], self.labels)
        return paths


def erdos_renyi(num_nodes: int, num_edges: int, seed: int, num_features: int = 16, num_classes: int = 4,
                num_relations: int = 1) -> SyntheticGraph:
    """num_edges directed edges drawn uniformly without self-loops; random features and labels"""
    if num_nodes < 2:
        raise InputError("an Erdos-Renyi graph needs at least 2 nodes")
    rng = np.random.default_rng(seed)
    src = rng.integers(0, num_nodes, size=num_edges)
    # shifting by 1..n-1 keeps the edge count exact without self-loops
    dst = (src + rng.integers(1, num_nodes, size=num_edges)) % num_nodes
    columns = [src, dst]
    if num_relations > 1:
        columns.append(rng.integers(0, num_relations, size=num_edges))
    graph = build_csr(np.stack(columns, axis=1), num_nodes, num_relations if num_relations > 1 else None)
    features = rng.standard_normal((num_nodes, num_features)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=num_nodes).astype(np.int64)
    logger.debug(f"Erdos-Renyi graph: {num_nodes} nodes, {graph.num_edges} edges")
    return SyntheticGraph(graph, features, labels)


def two_block_sbm(num_nodes: int = 400, p_in: float = 0.05, p_out: float = 0.005, seed: int = 0,
                  num_features: int = 16, signal: float = 1.0) -> SyntheticGraph:
    """
    Two equal communities with symmetric edges; the label is the community.

    Features are standard normal noise with the first column shifted by
    +/- signal according to the community.
    """
    rng = np.random.default_rng(seed)
    community = (np.arange(num_nodes) >= num_nodes // 2).astype(np.int64)
    same = community[:, None] == community[None, :]
    draws = rng.random((num_nodes, num_nodes)) < np.where(same, p_in, p_out)
    upper = np.triu(draws, k=1)
    src, dst = np.nonzero(upper)
    edges = np.concatenate([np.stack([src, dst], axis=1), np.stack([dst, src], axis=1)])
    graph = build_csr(edges, num_nodes)
    features = rng.standard_normal((num_nodes, num_features))
    features[:, 0] += signal * (2 * community - 1)
    logger.debug(f"SBM graph: {num_nodes} nodes, {graph.num_edges} edges")
    return SyntheticGraph(graph, features.astype(np.float32), community)

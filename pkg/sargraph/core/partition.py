from collections import deque
from dataclasses import dataclass
from typing import Dict, List
import logging

import numpy as np

from .errors import InputError
from .graph import Graph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionMap:
    """Assignment of every node to one of num_parts partitions"""
    assignment: np.ndarray
    num_parts: int

    def __post_init__(self):
        if self.num_parts < 1:
            raise InputError("num_parts must be >= 1")
        if len(self.assignment) and (self.assignment.min() < 0 or self.assignment.max() >= self.num_parts):
            raise InputError(f"partition ids must lie in [0, {self.num_parts})")
        self.assignment.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return int(len(self.assignment))

    def nodes_of(self, part: int) -> np.ndarray:
        """Global ids of V_part in canonical (ascending) order"""
        return np.flatnonzero(self.assignment == part).astype(np.int64)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_parts)

    def local_index(self) -> np.ndarray:
        """For every global node, its row inside its own partition"""
        local = np.empty(self.num_nodes, dtype=np.int64)
        for part in range(self.num_parts):
            nodes = self.nodes_of(part)
            local[nodes] = np.arange(len(nodes), dtype=np.int64)
        return local


def partition_balanced(graph: Graph, n_parts: int, seed: int) -> PartitionMap:
    """
    Balanced edge-cut partitioning by seeded multi-source BFS growth.

    Each part grows from a random seed node one vertex per round until it
    reaches its capacity (n // k, plus one for the first n % k parts). Nodes no
    frontier reaches are dealt round-robin to parts with spare capacity, so
    part sizes differ by at most one.
    """
    n = graph.num_nodes
    if n_parts < 1:
        raise InputError("n_parts must be >= 1")
    if n_parts > n:
        raise InputError(f"cannot split {n} nodes into {n_parts} parts")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    caps = np.array([n // n_parts + (1 if p < n % n_parts else 0) for p in range(n_parts)])
    sizes = np.zeros(n_parts, dtype=np.int64)
    assignment = np.full(n, -1, dtype=np.int64)
    neighbors = graph.undirected_neighbors()

    frontiers: List[deque] = [deque([int(order[p])]) for p in range(n_parts)]

    def assign(node: int, part: int) -> None:
        assignment[node] = part
        sizes[part] += 1
        frontiers[part].extend(int(v) for v in neighbors[node])

    growing = True
    while growing:
        growing = False
        for part in range(n_parts):
            if sizes[part] >= caps[part]:
                continue
            frontier = frontiers[part]
            while frontier and assignment[frontier[0]] != -1:
                frontier.popleft()
            if not frontier:
                continue
            assign(frontier.popleft(), part)
            growing = True

    unreached = np.flatnonzero(assignment == -1)
    if len(unreached):
        logger.debug(f"Round-robin placement of {len(unreached)} unreached nodes")
    part = 0
    for node in unreached:
        while sizes[part] >= caps[part]:
            part = (part + 1) % n_parts
        assignment[node] = part
        sizes[part] += 1
        part = (part + 1) % n_parts

    pm = PartitionMap(assignment=assignment, num_parts=n_parts)
    logger.info(f"Partitioned {n} nodes into {n_parts} parts, edge cut {edge_cut(graph, pm)}")
    return pm


def edge_cut(graph: Graph, pm: PartitionMap) -> int:
    """Number of directed edges whose endpoints lie in different partitions"""
    src, dst, _ = graph.edges()
    return int(np.count_nonzero(pm.assignment[src] != pm.assignment[dst]))


def partition_stats(graph: Graph, pm: PartitionMap) -> Dict[str, object]:
    sizes = pm.sizes()
    return {
        'num_parts': pm.num_parts,
        'sizes': sizes.tolist(),
        'edge_cut': edge_cut(graph, pm),
        'imbalance': int(sizes.max() - sizes.min()),
    }

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from .errors import InputError

logger = logging.getLogger(__name__)

EdgeList = Union[np.ndarray, Sequence[Tuple[int, ...]]]


@dataclass(frozen=True)
class Graph:
    """
    Directed graph stored as CSR grouped by destination.

    indices[indptr[i]:indptr[i+1]] are the sources of the edges entering i,
    sorted ascending. edge_type, when present, is aligned with indices.
    """
    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    edge_type: Optional[np.ndarray] = None
    num_relations: int = 1

    def __post_init__(self):
        if len(self.indptr) != self.num_nodes + 1:
            raise InputError("indptr must have num_nodes + 1 entries")
        if self.indptr[-1] != len(self.indices):
            raise InputError("indptr[num_nodes] must equal the number of edges")
        if np.any(np.diff(self.indptr) < 0):
            raise InputError("indptr must be nondecreasing")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.num_nodes):
            raise InputError("source id out of range")
        if self.edge_type is not None and len(self.edge_type):
            if len(self.edge_type) != len(self.indices):
                raise InputError("edge_type must be aligned with indices")
            if self.edge_type.max() >= self.num_relations:
                raise InputError("edge_type must be < num_relations")
        for arr in (self.indptr, self.indices, self.edge_type):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return int(len(self.indices))

    def destinations(self) -> np.ndarray:
        """Destination id of every edge, aligned with indices"""
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.indptr))

    def edges(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (src, dst, rel) arrays in canonical CSR order"""
        rel = self.edge_type if self.edge_type is not None else np.zeros(self.num_edges, dtype=np.int64)
        return self.indices, self.destinations(), rel

    def in_neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.indptr).astype(np.int64)

    def relation_degrees(self) -> np.ndarray:
        """Per node, per relation in-degree |N_i^r|, shape (num_nodes, num_relations)"""
        _, dst, rel = self.edges()
        degrees = np.zeros((self.num_nodes, self.num_relations), dtype=np.int64)
        np.add.at(degrees, (dst, rel.astype(np.int64)), 1)
        return degrees

    def undirected_neighbors(self) -> list:
        """Sorted union of in- and out-neighbors per node, used for partition growth"""
        src, dst, _ = self.edges()
        both_src = np.concatenate([src, dst])
        both_dst = np.concatenate([dst, src])
        order = np.lexsort((both_dst, both_src))
        both_src, both_dst = both_src[order], both_dst[order]
        bounds = np.searchsorted(both_src, np.arange(self.num_nodes + 1))
        return [np.unique(both_dst[bounds[v]:bounds[v + 1]]) for v in range(self.num_nodes)]


def build_csr(edge_list: EdgeList, num_nodes: int, num_relations: Optional[int] = None) -> Graph:
    """
    Build a destination-grouped CSR graph from (src, dst[, rel]) tuples.

    Sources are sorted ascending within each destination; duplicates are kept.
    """
    edges = np.asarray(edge_list, dtype=np.int64)
    if edges.size == 0:
        edges = edges.reshape(0, 2)
    if edges.ndim != 2 or edges.shape[1] not in (2, 3):
        raise InputError("edge list must hold (src, dst) or (src, dst, rel) rows")
    if num_nodes < 0:
        raise InputError("num_nodes must be non-negative")

    src, dst = edges[:, 0], edges[:, 1]
    has_rel = edges.shape[1] == 3
    rel = edges[:, 2] if has_rel else np.zeros(len(edges), dtype=np.int64)

    if len(edges):
        if min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes:
            raise InputError(f"node id out of range for a graph with {num_nodes} nodes")
        if rel.min() < 0:
            raise InputError("relation ids must be non-negative")

    if num_relations is None:
        num_relations = int(rel.max()) + 1 if has_rel and len(rel) else 1
    elif len(rel) and rel.max() >= num_relations:
        raise InputError(f"relation id {int(rel.max())} >= num_relations {num_relations}")

    order = np.lexsort((rel, src, dst))
    src, dst, rel = src[order], dst[order], rel[order]
    counts = np.bincount(dst, minlength=num_nodes)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])

    edge_type = rel.astype(np.int64) if has_rel else None
    return Graph(
        num_nodes=num_nodes,
        indptr=indptr,
        indices=src.copy(),
        edge_type=edge_type,
        num_relations=num_relations,
    )


def symmetrize(edge_list: Iterable[Tuple[int, ...]]) -> np.ndarray:
    """Add the reverse of every non-self-loop edge, keeping its relation id"""
    edges = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list, dtype=np.int64)
    if edges.size == 0:
        return edges.reshape(0, 2)
    reverse = edges[edges[:, 0] != edges[:, 1]].copy()
    reverse[:, [0, 1]] = reverse[:, [1, 0]]
    return np.concatenate([edges, reverse])

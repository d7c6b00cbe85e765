from dataclasses import dataclass
from typing import List, Optional, Tuple
import logging

import numpy as np

from .errors import InputError
from .graph import Graph
from .partition import PartitionMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShardBlock:
    """
    Edges from the vertices of partition src_part into partition dst_part.

    dst_index[e] is the destination row inside V_dst_part, src_index[e] the
    row inside src_global_ids. Edges are in canonical order (destination,
    then source global id).
    """
    dst_part: int
    src_part: int
    dst_index: np.ndarray
    src_index: np.ndarray
    src_global_ids: np.ndarray
    edge_type: Optional[np.ndarray] = None

    @property
    def num_edges(self) -> int:
        return int(len(self.dst_index))

    @property
    def num_src(self) -> int:
        return int(len(self.src_global_ids))

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return list(zip(self.dst_index.tolist(), self.src_index.tolist()))

    @property
    def is_local(self) -> bool:
        return self.dst_part == self.src_part

    def relations(self) -> np.ndarray:
        if self.edge_type is None:
            return np.zeros(self.num_edges, dtype=np.int64)
        return self.edge_type

    def restrict_to(self, dst_mask: np.ndarray) -> "ShardBlock":
        """Keep only edges whose destination row is set in dst_mask, recompacting sources"""
        keep = dst_mask[self.dst_index]
        used = np.unique(self.src_index[keep])
        remap = np.full(self.num_src, -1, dtype=np.int64)
        remap[used] = np.arange(len(used), dtype=np.int64)
        return ShardBlock(
            dst_part=self.dst_part,
            src_part=self.src_part,
            dst_index=self.dst_index[keep],
            src_index=remap[self.src_index[keep]],
            src_global_ids=self.src_global_ids[used],
            edge_type=None if self.edge_type is None else self.edge_type[keep],
        )


def build_shard_blocks(graph: Graph, pm: PartitionMap, p: int) -> List[ShardBlock]:
    """Build G_{p,q} for q = 0..N-1, the fixed iteration order of the SAR loops"""
    if not 0 <= p < pm.num_parts:
        raise InputError(f"partition {p} out of range for {pm.num_parts} parts")
    if pm.num_nodes != graph.num_nodes:
        raise InputError("partition map does not match the graph")

    src, dst, rel = graph.edges()
    local = pm.local_index()
    into_p = pm.assignment[dst] == p
    src, dst, rel = src[into_p], dst[into_p], rel[into_p]
    src_part = pm.assignment[src]

    blocks = []
    for q in range(pm.num_parts):
        sel = src_part == q
        block_src = src[sel]
        src_global_ids, src_index = np.unique(block_src, return_inverse=True)
        blocks.append(ShardBlock(
            dst_part=p,
            src_part=q,
            dst_index=local[dst[sel]],
            src_index=src_index.astype(np.int64).reshape(-1),
            src_global_ids=src_global_ids.astype(np.int64),
            edge_type=rel[sel].astype(np.int64) if graph.edge_type is not None else None,
        ))
    logger.debug(f"Partition {p}: block edge counts {[b.num_edges for b in blocks]}")
    return blocks


def build_export_rows(graph: Graph, pm: PartitionMap, q: int,
                      dst_mask: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """
    For every partition p, the rows of V_q (local indices, ascending global id)
    that are sources of G_{p,q}: the rows of the error message p sends back to q.

    dst_mask, a boolean mask over all nodes, drops edges into unmasked
    destinations the same way ShardBlock.restrict_to does.
    """
    if not 0 <= q < pm.num_parts:
        raise InputError(f"partition {q} out of range for {pm.num_parts} parts")
    src, dst, _ = graph.edges()
    local = pm.local_index()
    keep = pm.assignment[src] == q
    if dst_mask is not None:
        keep &= dst_mask[dst]
    src, dst_part = src[keep], pm.assignment[dst[keep]]
    return [local[np.unique(src[dst_part == p])].astype(np.int64) for p in range(pm.num_parts)]


@dataclass(frozen=True)
class LocalDegrees:
    """Full-graph in-degrees of the nodes of one partition, in local row order"""
    in_degrees: np.ndarray
    relation_degrees: np.ndarray

    @classmethod
    def build(cls, graph: Graph, pm: PartitionMap, p: int) -> "LocalDegrees":
        owned = pm.nodes_of(p)
        return cls(in_degrees=graph.in_degrees()[owned], relation_degrees=graph.relation_degrees()[owned])

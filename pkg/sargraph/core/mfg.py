from typing import Iterable, List, Union
import logging

import numpy as np

from .errors import InputError
from .graph import Graph

logger = logging.getLogger(__name__)


def compute_mfg_masks(graph: Graph, labeled: Union[np.ndarray, Iterable[int]], num_layers: int) -> List[np.ndarray]:
    """
    Per-layer active node masks of the message flow graph.

    masks[num_layers] marks the labeled nodes; masks[l] adds the in-neighbors
    of masks[l+1]. Layer l (1-based) only needs outputs for masks[l], reading
    inputs from masks[l-1].
    """
    if num_layers < 0:
        raise InputError("num_layers must be non-negative")
    labeled = np.asarray(labeled)
    if labeled.dtype == bool:
        if len(labeled) != graph.num_nodes:
            raise InputError("boolean labeled mask must cover every node")
        top = labeled.copy()
    else:
        ids = labeled.astype(np.int64).reshape(-1)
        if len(ids) and (ids.min() < 0 or ids.max() >= graph.num_nodes):
            raise InputError("labeled node id out of range")
        top = np.zeros(graph.num_nodes, dtype=bool)
        top[ids] = True

    src, dst, _ = graph.edges()
    masks = [top]
    for _ in range(num_layers):
        current = masks[0]
        expanded = current.copy()
        expanded[src[current[dst]]] = True
        masks.insert(0, expanded)
    logger.debug(f"MFG mask sizes per layer: {[int(m.sum()) for m in masks]}")
    return masks

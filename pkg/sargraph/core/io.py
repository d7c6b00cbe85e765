"""
File formats: edge lists, partition maps, node-set splits and SARF tensors.

SARF layout: b"SARF", u32 version (1), u64 rows, u64 cols, u8 dtype
(0 = f32, 1 = f64), then row-major little-endian values.
"""
from pathlib import Path
from typing import Optional, Union
import logging
import struct

import numpy as np

from .errors import InputError
from .graph import Graph, build_csr, symmetrize
from .partition import PartitionMap

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SARF_MAGIC = b"SARF"
SARF_VERSION = 1
_SARF_HEADER = struct.Struct("<4sIQQB")
_SARF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_SARF_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def read_edge_list(path: PathLike, num_nodes: Optional[int] = None, symmetrize_edges: bool = False) -> Graph:
    """Parse 'src dst' or 'src dst rel' lines; '#' lines are comments"""
    path = Path(path)
    rows = []
    width = None
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith('#'):
                    continue
                parts = line.split()
                if len(parts) not in (2, 3):
                    raise InputError(f"{path}:{lineno}: expected 'src dst [rel]', got {line!r}")
                if width is None:
                    width = len(parts)
                elif width != len(parts):
                    raise InputError(f"{path}:{lineno}: mixed 2- and 3-column edges")
                try:
                    rows.append(tuple(int(x) for x in parts))
                except ValueError as e:
                    raise InputError(f"{path}:{lineno}: non-integer id") from e
    except OSError as e:
        raise InputError(f"Cannot read edge list {path}: {e}") from e

    edges = np.asarray(rows, dtype=np.int64).reshape(-1, width or 2)
    if symmetrize_edges:
        edges = symmetrize(edges)
    if num_nodes is None:
        num_nodes = int(edges[:, :2].max()) + 1 if len(edges) else 0
    graph = build_csr(edges, num_nodes)
    logger.info(f"Loaded graph {path.name}: {graph.num_nodes} nodes, {graph.num_edges} edges, "
                f"{graph.num_relations} relation(s)")
    return graph


def write_edge_list(path: PathLike, graph: Graph) -> None:
    src, dst, rel = graph.edges()
    with open(path, 'w', encoding='utf-8') as f:
        f.write(f"# {graph.num_nodes} nodes\n")
        for s, d, r in zip(src.tolist(), dst.tolist(), rel.tolist()):
            if graph.edge_type is None:
                f.write(f"{s} {d}\n")
            else:
                f.write(f"{s} {d} {r}\n")


def read_partition_map(path: PathLike, num_parts: Optional[int] = None) -> PartitionMap:
    """
    Line i holds the partition id of node i.

    The file cannot express empty trailing parts, so num_parts should come
    from the job; without it the count is max id + 1.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            ids = [int(line) for line in f if line.strip()]
    except (OSError, ValueError) as e:
        raise InputError(f"Cannot read partition map {path}: {e}") from e
    assignment = np.asarray(ids, dtype=np.int64)
    highest = int(assignment.max()) if len(assignment) else 0
    if num_parts is None:
        num_parts = highest + 1
    elif highest >= num_parts:
        raise InputError(f"{path}: partition id {highest} out of range for {num_parts} parts")
    pm = PartitionMap(assignment=assignment, num_parts=num_parts)
    empty = np.flatnonzero(pm.sizes() == 0).tolist()
    if empty:
        logger.warning(f"{path}: partitions {empty} own no nodes")
    return pm


def write_partition_map(path: PathLike, pm: PartitionMap) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.writelines(f"{int(p)}\n" for p in pm.assignment)


def read_node_set(path: PathLike) -> np.ndarray:
    """One node id per line, returned sorted and unique"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            ids = [int(line.split()[0]) for line in f if line.strip() and not line.startswith('#')]
    except (OSError, ValueError) as e:
        raise InputError(f"Cannot read node set {path}: {e}") from e
    return np.unique(np.asarray(ids, dtype=np.int64))


def write_node_set(path: PathLike, nodes: np.ndarray) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.writelines(f"{int(v)}\n" for v in nodes)


def encode_sarf(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise InputError("SARF holds 2-D tensors only")
    code = _SARF_CODES.get(matrix.dtype)
    if code is None:
        raise InputError(f"SARF supports f32/f64, got {matrix.dtype}")
    header = _SARF_HEADER.pack(SARF_MAGIC, SARF_VERSION, matrix.shape[0], matrix.shape[1], code)
    return header + np.ascontiguousarray(matrix, dtype=_SARF_DTYPES[code]).tobytes()


def decode_sarf(blob: bytes) -> np.ndarray:
    if len(blob) < _SARF_HEADER.size:
        raise InputError("SARF blob shorter than its header")
    magic, version, rows, cols, code = _SARF_HEADER.unpack_from(blob, 0)
    if magic != SARF_MAGIC:
        raise InputError("invalid SARF magic")
    if version != SARF_VERSION:
        raise InputError(f"unsupported SARF version {version}")
    dtype = _SARF_DTYPES.get(code)
    if dtype is None:
        raise InputError(f"unknown SARF dtype code {code}")
    expected = rows * cols * dtype.itemsize
    body = blob[_SARF_HEADER.size:]
    if len(body) != expected:
        raise InputError(f"SARF payload is {len(body)} bytes, header declares {expected}")
    values = np.frombuffer(body, dtype=dtype).reshape(rows, cols)
    return values.astype(dtype.newbyteorder('='))


def write_sarf(path: PathLike, matrix: np.ndarray) -> None:
    with open(path, 'wb') as f:
        f.write(encode_sarf(matrix))


def read_sarf(path: PathLike) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise InputError(f"Cannot read tensor file {path}: {e}") from e
    return decode_sarf(blob)


def read_labels(path: PathLike) -> np.ndarray:
    """Labels are a 1-column f32 SARF file of class ids, -1 for unlabeled"""
    labels = read_sarf(path)
    if labels.shape[1] != 1:
        raise InputError(f"label file {path} must have one column")
    return labels[:, 0].astype(np.int64)


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    write_sarf(path, np.asarray(labels, dtype=np.float32).reshape(-1, 1))

from pathlib import Path
from typing import Dict, List, Optional
import logging

import numpy as np
import pandas as pd

from ..core.errors import InputError
from ..core.io import read_edge_list, read_labels, read_node_set, read_partition_map, read_sarf, write_partition_map
from ..core.partition import partition_balanced, partition_stats
from ..runtime.launcher import run_loopback, run_tcp_worker
from ..runtime.metrics import MetricsSink
from ..runtime.worker import JobData, TrainResult
from ..transport.tcp import read_rankfile, resolve_rank
from .models import BenchMode, BenchRow, Policy, TrainConfig, TransportKind

logger = logging.getLogger(__name__)


def _require(config: TrainConfig, *keys: str) -> None:
    missing = [key for key in keys if getattr(config, key) in (None, "")]
    if missing:
        raise InputError(f"config is missing {', '.join(missing)}")


def load_job_data(config: TrainConfig) -> JobData:
    _require(config, "graph", "features", "labels")
    features = read_sarf(config.features)
    graph = read_edge_list(config.graph, num_nodes=features.shape[0], symmetrize_edges=config.symmetrize)
    labels = read_labels(config.labels)
    if config.partition and Path(config.partition).exists():
        # n_parts is authoritative only when the job sets it
        pm = read_partition_map(config.partition, config.n_parts if "n_parts" in config.model_fields_set else None)
    else:
        pm = partition_balanced(graph, config.n_parts, config.partition_seed)
    train = read_node_set(config.train_nodes) if config.train_nodes else np.flatnonzero(labels >= 0)
    empty = np.zeros(0, dtype=np.int64)
    return JobData(
        graph=graph,
        features=features,
        labels=labels,
        partition=pm,
        train_nodes=train,
        val_nodes=read_node_set(config.val_nodes) if config.val_nodes else empty,
        test_nodes=read_node_set(config.test_nodes) if config.test_nodes else empty,
    )


def cmd_partition(config: TrainConfig) -> Dict[str, object]:
    """Partition the graph, write the map and print a stats line"""
    _require(config, "graph", "partition")
    num_nodes = read_sarf(config.features).shape[0] if config.features else None
    graph = read_edge_list(config.graph, num_nodes=num_nodes, symmetrize_edges=config.symmetrize)
    pm = partition_balanced(graph, config.n_parts, config.partition_seed)
    write_partition_map(config.partition, pm)
    stats = partition_stats(graph, pm)
    print(f"parts={stats['num_parts']} sizes={','.join(str(s) for s in stats['sizes'])} "
          f"edge_cut={stats['edge_cut']} imbalance={stats['imbalance']}")
    logger.info(f"Partition map written to {config.partition}")
    return stats


def _metrics_path(path: str, rank: Optional[int], world_size: int) -> Path:
    path = Path(path)
    if rank is None or world_size == 1:
        return path
    return path.with_name(f"{path.stem}.rank{rank}{path.suffix}")


def _run(config: TrainConfig, data: JobData, sink: MetricsSink, progress: bool) -> List[TrainResult]:
    if not config.layers:
        raise InputError("config defines no layers")
    if config.transport == TransportKind.LOOPBACK:
        return run_loopback(config, data, sink, progress)
    rank, rankfile = resolve_rank(config.rank, config.rankfile)
    if rank is None or rankfile is None:
        raise InputError("the tcp transport needs a rank and a rank file")
    addresses = read_rankfile(rankfile)
    if rank not in addresses:
        raise InputError(f"rank {rank} is not listed in {rankfile}")
    return [run_tcp_worker(config, data, rank, addresses, sink, progress)]


def cmd_train(config: TrainConfig, progress: bool = True, data: Optional[JobData] = None) -> List[TrainResult]:
    """Train, write the metrics CSV (also after a failure) and the final checkpoint"""
    data = data or load_job_data(config)
    sink = MetricsSink()
    try:
        results = _run(config, data, sink, progress)
    finally:
        if config.metrics_path and len(sink):
            rank = None if config.transport == TransportKind.LOOPBACK else resolve_rank(config.rank, None)[0]
            sink.write_csv(_metrics_path(config.metrics_path, rank, data.partition.num_parts))
    final_loss = results[0].final_loss
    print(f"final loss {final_loss:.6f}")
    return results


BENCH_SETTINGS = {
    BenchMode.VANILLA_DP: {"policy": Policy.VANILLA_DP, "fused": False},
    BenchMode.SAR: {"policy": Policy.SAR, "fused": False},
    BenchMode.SAR_FUSED: {"policy": Policy.SAR, "fused": True},
}


def cmd_bench(config: TrainConfig, progress: bool = False, data: Optional[JobData] = None) -> pd.DataFrame:
    """Run bench_epochs epochs per mode and tabulate time, peak memory and traffic per worker"""
    data = data or load_job_data(config)
    sink = MetricsSink()
    for mode in config.bench_modes:
        settings = dict(BENCH_SETTINGS[mode], epochs=config.bench_epochs, evaluate=False,
                        checkpoint_path=None, resume_from=None)
        mode_config = config.model_copy(update=settings)
        logger.info(f"Bench mode {mode.value}: {config.bench_epochs} epochs")
        for result in _run(mode_config, data, MetricsSink(), progress):
            last = result.metrics[-1]
            sink.add(BenchRow(
                mode=mode,
                worker=result.rank,
                epochs=len(result.metrics),
                epoch_seconds=float(np.mean([m.epoch_seconds for m in result.metrics])),
                peak_resident_blocks=max(m.peak_resident_blocks for m in result.metrics),
                peak_bytes=max(m.peak_bytes for m in result.metrics),
                fwd_feature_bytes=last.fwd_feature_bytes,
                bwd_feature_bytes=last.bwd_feature_bytes,
                bwd_gradient_bytes=last.bwd_gradient_bytes,
                allreduce_bytes=last.allreduce_bytes,
                total_comm_bytes=last.fwd_feature_bytes + last.bwd_feature_bytes + last.bwd_gradient_bytes,
                loss=last.loss,
            ))
    frame = sink.frame()
    if config.bench_path:
        rank = None if config.transport == TransportKind.LOOPBACK else resolve_rank(config.rank, None)[0]
        sink.write_csv(_metrics_path(config.bench_path, rank, data.partition.num_parts))
    print(frame.to_string(index=False))
    return frame

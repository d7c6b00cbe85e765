"""
One worker's full-batch training loop.

Every epoch runs the layer stack forward through the SAR runtime, computes the
loss over this worker's training rows (normalized by the global training
count), walks the tape backward handing each aggregation boundary to
sar_backward, all-reduces the gradients and takes the same Adam step as every
other worker.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import logging
import time

import numpy as np
from tqdm import tqdm

from ..api.models import EpochMetrics, Policy, TrainConfig
from ..core.autodiff import Tape, Var, activation, dropout, log_softmax_nll, row_mask
from ..core.errors import ContractViolation, InputError
from ..core.graph import Graph
from ..core.mfg import compute_mfg_masks
from ..core.params import Adam, load_checkpoint, save_checkpoint
from ..core.partition import PartitionMap
from ..core.shards import LocalDegrees, build_export_rows, build_shard_blocks
from ..layers.batchnorm import dist_batchnorm
from ..transport.base import Transport
from .ledger import CommLedger, LedgerReport, MemoryLedger, Phase, ledger_check
from .metrics import MetricsSink
from .model import GnnModel
from .sar import Aggregator, AggregationState, RematPolicy, SarContext, allreduce_param_grads, sar_backward, sar_forward

logger = logging.getLogger(__name__)

EVAL_LAYER_BASE = 1000
SPLITS = ("train", "val", "test")


@dataclass
class JobData:
    """Inputs every worker of a job shares"""
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    partition: PartitionMap
    train_nodes: np.ndarray
    val_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InputError(f"features must have {n} rows, got shape {self.features.shape}")
        if len(self.labels) != n:
            raise InputError(f"labels must have {n} entries, got {len(self.labels)}")
        if self.partition.num_nodes != n:
            raise InputError("partition map does not match the graph")
        for name in SPLITS:
            nodes = np.unique(np.asarray(getattr(self, f"{name}_nodes"), dtype=np.int64))
            if len(nodes) and (nodes.min() < 0 or nodes.max() >= n):
                raise InputError(f"{name} split holds node ids outside the graph")
            setattr(self, f"{name}_nodes", nodes)
        if len(self.train_nodes) == 0:
            raise InputError("the training split is empty")
        if np.any(self.labels[self.train_nodes] < 0):
            raise InputError("every training node needs a label")


@dataclass
class LayerStep:
    aggregator: Aggregator
    state: AggregationState
    z: Var
    ctx: SarContext


@dataclass
class TrainResult:
    rank: int
    metrics: List[EpochMetrics]
    final_loss: float
    params: Dict[str, np.ndarray]
    computed_nodes: List[int]
    ledger_reports: List[LedgerReport]


class Worker:
    def __init__(self, config: TrainConfig, data: JobData, transport: Transport,
                 sink: Optional[MetricsSink] = None):
        self.config = config
        self.transport = transport
        self.rank = transport.rank
        self.sink = sink
        pm = data.partition
        if pm.num_parts != transport.world_size:
            raise InputError(f"partition has {pm.num_parts} parts but the job has {transport.world_size} workers")
        if data.features.shape[1] != config.layers[0].in_dim:
            raise InputError(f"features have width {data.features.shape[1]}, "
                             f"the first layer expects {config.layers[0].in_dim}")

        self.dtype = np.dtype(config.numpy_dtype)
        self.owned = pm.nodes_of(self.rank)
        self.ledger = MemoryLedger()
        self.comm = CommLedger()
        policy = RematPolicy.RETAIN if config.policy == Policy.VANILLA_DP else RematPolicy.SAR
        self.base_ctx = SarContext(
            rank=self.rank,
            transport=transport,
            blocks=build_shard_blocks(data.graph, pm, self.rank),
            owned=self.owned,
            export_rows=build_export_rows(data.graph, pm, self.rank),
            dtype=self.dtype,
            ledger=self.ledger,
            comm=self.comm,
            prefetch=config.prefetch,
            policy=policy,
        )
        self.degrees = LocalDegrees.build(data.graph, pm, self.rank)
        self.features = data.features[self.owned].astype(self.dtype)
        self.labels = np.asarray(data.labels, dtype=np.int64)[self.owned]
        self.split_masks = {name: np.isin(self.owned, getattr(data, f"{name}_nodes")) for name in SPLITS}
        self.global_train = len(data.train_nodes)

        self.model = GnnModel(config.layers, [config.layer_activation(i) for i in range(len(config.layers))],
                              data.graph.num_relations, self.dtype, config.seed)
        self.optimizer = Adam(lr=config.lr, decay=config.lr_decay, step_size=config.lr_step)

        num_layers = len(config.layers)
        self.contexts: Dict[int, SarContext] = {}
        self.row_masks: Dict[int, np.ndarray] = {}
        if config.mfg:
            masks = compute_mfg_masks(data.graph, data.train_nodes, num_layers)
            for i in range(1, num_layers + 1):
                local_mask = masks[i][self.owned]
                exports = build_export_rows(data.graph, pm, self.rank, masks[i])
                self.contexts[i] = self.base_ctx.restricted(local_mask, exports)
                self.row_masks[i] = local_mask
        else:
            self.contexts = {i: self.base_ctx for i in range(1, num_layers + 1)}
        self.computed_nodes = [int(self.row_masks[i].sum()) if config.mfg else len(self.owned)
                               for i in range(1, num_layers + 1)]

        self.metrics: List[EpochMetrics] = []
        self.reports: List[LedgerReport] = []
        self.start_epoch = 0
        if config.resume_from:
            self.restore(config.resume_from)
        logger.info(f"[rank {self.rank}] {len(self.owned)} nodes, "
                    f"{sum(b.num_edges for b in self.base_ctx.blocks)} in-edges, "
                    f"{int(self.split_masks['train'].sum())} training rows")

    def forward(self, tape: Tape, epoch: int, training: bool, contexts: Dict[int, SarContext],
                layer_base: int = 0, mfg: bool = False) -> Tuple[Var, Dict[int, LayerStep]]:
        store = self.model.store
        params = store.bind(tape)
        h = tape.leaf(self.features)
        steps: Dict[int, LayerStep] = {}
        for i, (layer, config) in enumerate(zip(self.model.layers, self.config.layers), start=1):
            ctx = contexts[i]
            z = layer.transform(tape, h, params)
            aggregator = layer.aggregator(store, self.degrees, fused=self.config.fused,
                                          chunk_edges=self.config.chunk_edges)
            state = sar_forward(layer_base + i, aggregator, z.value, ctx, tape, training)
            steps[state.acc_var.id] = LayerStep(aggregator, state, z, ctx)
            out = activation(tape, layer.combine(tape, h, state.acc_var, params), layer.activation)
            norm = self.model.norms.get(i)
            if norm is not None:
                out = dist_batchnorm(tape, out, params[norm.gamma_name], params[norm.beta_name], norm,
                                     self.transport, training, ctx.comm)
            if training and config.dropout > 0:
                out = dropout(tape, out, config.dropout, self.owned, self.config.seed, i, epoch)
            if mfg:
                out = row_mask(tape, out, self.row_masks[i])
            h = out
        return h, steps

    def backward(self, tape: Tape, loss: Var, steps: Dict[int, LayerStep]) -> None:
        store = self.model.store
        seeds = {loss: np.ones((1, 1))}
        while True:
            hit = tape.backward(seeds)
            if hit is None:
                break
            acc_var, e_acc = hit
            step = steps.pop(acc_var.id)
            e_local, theta = sar_backward(step.state, step.aggregator, e_acc, step.ctx)
            for name, grad in theta.items():
                store.accumulate_grad(name, grad)
            seeds = {step.z: e_local}
        if steps:
            raise ContractViolation(f"{len(steps)} aggregation boundaries were never reached by backward")
        store.collect(tape)

    def train_epoch(self, epoch: int) -> EpochMetrics:
        self.ledger.reset_peaks()
        self.comm.reset()
        started = time.perf_counter()
        store = self.model.store
        store.zero_grad()

        tape = Tape(check_finite=self.config.check_finite)
        logits, steps = self.forward(tape, epoch, True, self.contexts, mfg=self.config.mfg)
        loss = log_softmax_nll(tape, logits, self.labels, self.split_masks["train"],
                               normalizer=float(self.global_train))
        self.backward(tape, loss, steps)

        allreduce_param_grads(store, self.transport, self.comm)
        if self.transport.world_size > 1:
            self.comm.add(Phase.ALLREDUCE, loss.value.nbytes)
        total_loss = float(self.transport.allreduce_sum([loss.value])[0][0, 0])
        self.optimizer.step(store, epoch)
        seconds = time.perf_counter() - started

        report = ledger_check(self.ledger, self.config.prefetch)
        self.reports.append(report)
        if not report.passed and self.base_ctx.policy is RematPolicy.SAR:
            logger.error(f"[rank {self.rank}] epoch {epoch}: residency check failed: {report.message}")

        accuracy = self.evaluate() if self.config.evaluate else {}
        counters = self.comm.as_dict()
        metrics = EpochMetrics(
            epoch=epoch,
            worker=self.rank,
            epoch_seconds=seconds,
            peak_resident_blocks=self.ledger.peak_resident,
            peak_bytes=self.ledger.peak_bytes,
            fwd_feature_bytes=counters[Phase.FWD_FEATURES.value],
            bwd_feature_bytes=counters[Phase.BWD_FEATURES.value],
            bwd_gradient_bytes=counters[Phase.BWD_GRADIENTS.value],
            allreduce_bytes=counters[Phase.ALLREDUCE.value],
            loss=total_loss,
            lr=self.optimizer.lr_at(epoch),
            ledger_ok=report.passed,
            train_acc=accuracy.get("train"),
            val_acc=accuracy.get("val"),
            test_acc=accuracy.get("test"),
        )
        self.metrics.append(metrics)
        if self.sink is not None:
            self.sink.add(metrics)
        return metrics

    def evaluate(self) -> Dict[str, Optional[float]]:
        """Inference forward over the full graph; accuracy per split, identical on every worker"""
        eval_ctx = self.base_ctx.with_ledgers(MemoryLedger(), CommLedger())
        contexts = {i: eval_ctx for i in self.contexts}
        tape = Tape()
        with tape.paused():
            logits, _ = self.forward(tape, 0, False, contexts, layer_base=EVAL_LAYER_BASE)
        predicted = np.argmax(np.asarray(logits.value, dtype=np.float64), axis=1)
        counts = []
        for name in SPLITS:
            mask = self.split_masks[name]
            counts.extend([float(np.sum(predicted[mask] == self.labels[mask])), float(mask.sum())])
        totals = self.transport.allreduce_sum([np.array([counts])])[0][0]
        for i in self.contexts:
            self.transport.unpublish(EVAL_LAYER_BASE + i)
        return {name: (totals[2 * k] / totals[2 * k + 1] if totals[2 * k + 1] else None)
                for k, name in enumerate(SPLITS)}

    def restore(self, path: str) -> None:
        tensors, meta = load_checkpoint(path)
        self.model.store.load_state(tensors, meta.get("step", 0))
        self.model.load_buffers({name[len("buffer."):]: value for name, value in tensors.items()
                                 if name.startswith("buffer.")})
        self.start_epoch = meta.get("epoch", 0)
        logger.info(f"[rank {self.rank}] resumed from {path} at epoch {self.start_epoch}")

    def train(self, progress: bool = True) -> TrainResult:
        epochs = range(self.start_epoch, self.config.epochs)
        bar = tqdm(epochs, desc="epochs", unit="epoch", disable=True if not progress or self.rank != 0 else None)
        for epoch in bar:
            metrics = self.train_epoch(epoch)
            bar.set_postfix(loss=f"{metrics.loss:.4f}")
            logger.info(f"[rank {self.rank}] epoch {epoch}: loss {metrics.loss:.6f}, "
                        f"{metrics.epoch_seconds:.2f}s, peak residency {metrics.peak_resident_blocks}")
        bar.close()

        if self.config.checkpoint_path and self.rank == 0:
            save_checkpoint(self.config.checkpoint_path, self.model.store, self.config.epochs, self.model.buffers())
        self.transport.barrier()
        final_loss = self.metrics[-1].loss if self.metrics else float("nan")
        return TrainResult(
            rank=self.rank,
            metrics=list(self.metrics),
            final_loss=final_loss,
            params={name: value.copy() for name, value in self.model.store.items()},
            computed_nodes=list(self.computed_nodes),
            ledger_reports=list(self.reports),
        )

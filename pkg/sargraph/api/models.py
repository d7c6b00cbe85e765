from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Optional
from enum import Enum

import numpy as np


class LayerType(str, Enum):
    SAGE = "sage"
    GAT = "gat"
    RGCN = "rgcn"


class Activation(str, Enum):
    RELU = "relu"
    ELU = "elu"
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


class TransportKind(str, Enum):
    LOOPBACK = "loopback"
    TCP = "tcp"


class DTypeMode(str, Enum):
    F32_ACCUM64 = "f32-accum64"
    F64 = "f64"


class Policy(str, Enum):
    SAR = "sar"
    VANILLA_DP = "vanilla-dp"


class BenchMode(str, Enum):
    VANILLA_DP = "vanilla-dp"
    SAR = "sar"
    SAR_FUSED = "sar+fused"


class LayerConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    type: LayerType = Field(..., description="Layer kind")
    in_dim: int = Field(..., ge=1, description="Input feature width")
    out_dim: int = Field(..., ge=1, description="Output width (per head for gat)")
    heads: int = Field(1, ge=1, description="Attention heads (gat)")
    slope: float = Field(0.2, ge=0, description="LeakyReLU slope of the attention logits (gat)")
    activation: Optional[Activation] = Field(None, description="Defaults: relu for sage, elu for gat/rgcn, identity on the last layer")
    dropout: float = Field(0.0, ge=0, lt=1, description="Dropout probability applied after the layer")
    batchnorm: bool = Field(False, description="Distributed BatchNorm after the activation")
    num_bases: Optional[int] = Field(None, ge=1, description="Basis tensors (rgcn), defaults to the relation count")
    self_weight: bool = Field(False, description="Extra self-connection weight (rgcn)")

    @property
    def output_width(self) -> int:
        return self.out_dim * self.heads if self.type == LayerType.GAT else self.out_dim


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    graph: Optional[str] = Field(None, description="Edge-list file")
    features: Optional[str] = Field(None, description="SARF node feature matrix")
    labels: Optional[str] = Field(None, description="SARF label column, -1 for unlabeled")
    partition: Optional[str] = Field(None, description="Partition-map file (read, or written by partition)")
    n_parts: int = Field(1, ge=1, le=255, description="Worker count; also the part count of a partition file when set")
    partition_seed: int = Field(0, description="Seed of the BFS partitioner")
    symmetrize: bool = Field(False, description="Add reverse edges when reading the graph")
    train_nodes: Optional[str] = Field(None, description="Node-set file of the training split")
    val_nodes: Optional[str] = Field(None, description="Node-set file of the validation split")
    test_nodes: Optional[str] = Field(None, description="Node-set file of the test split")
    layers: List[LayerConfig] = Field(default_factory=list, description="Layer stack, input to output")
    epochs: int = Field(100, ge=1, description="Training epochs")
    lr: float = Field(0.01, ge=0, description="Adam learning rate")
    lr_decay: float = Field(0.3, gt=0, le=1, description="Step decay factor")
    lr_step: int = Field(30, ge=1, description="Epochs between decays")
    seed: int = Field(0, description="Parameter init and dropout seed")
    prefetch: bool = Field(False, description="Fetch the next remote block while aggregating the current one")
    mfg: bool = Field(False, description="Restrict each layer to its message-flow-graph nodes")
    transport: TransportKind = Field(TransportKind.LOOPBACK, description="Worker transport")
    dtype: DTypeMode = Field(DTypeMode.F32_ACCUM64, description="Value precision")
    policy: Policy = Field(Policy.SAR, description="Remote block lifetime")
    fused: bool = Field(True, description="Chunked on-the-fly attention coefficients")
    chunk_edges: int = Field(256, ge=1, description="Edges per fused attention chunk")
    metrics_path: Optional[str] = Field(None, description="Per-epoch metrics CSV")
    checkpoint_path: Optional[str] = Field(None, description="Directory of the final checkpoint")
    resume_from: Optional[str] = Field(None, description="Checkpoint directory to continue from")
    evaluate: bool = Field(True, description="Report per-split accuracy every epoch")
    bench_epochs: int = Field(3, ge=1, description="Epochs per bench mode")
    bench_modes: List[BenchMode] = Field(default_factory=lambda: list(BenchMode), description="Modes compared by bench")
    bench_path: Optional[str] = Field(None, description="Bench CSV")
    rank: Optional[int] = Field(None, ge=0, description="This process's rank (tcp)")
    rankfile: Optional[str] = Field(None, description="Rank file of 'rank host:port' lines (tcp)")
    timeout: float = Field(120.0, gt=0, description="Seconds any blocking transport call may wait")
    check_finite: bool = Field(False, description="Fail on the first non-finite tape value")

    @model_validator(mode='after')
    def check_layers(self) -> "TrainConfig":
        for i in range(1, len(self.layers)):
            previous, current = self.layers[i - 1], self.layers[i]
            if current.in_dim != previous.output_width:
                raise ValueError(f"layer {i} in_dim {current.in_dim} does not match layer {i - 1} "
                                 f"output width {previous.output_width}")
        if self.mfg and any(layer.batchnorm for layer in self.layers):
            raise ValueError("mfg mode cannot be combined with batchnorm")
        return self

    def layer_activation(self, index: int) -> Activation:
        layer = self.layers[index]
        if layer.activation is not None:
            return layer.activation
        if index == len(self.layers) - 1:
            return Activation.IDENTITY
        return Activation.RELU if layer.type == LayerType.SAGE else Activation.ELU

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.float64 if self.dtype == DTypeMode.F64 else np.float32


class EpochMetrics(BaseModel):
    epoch: int
    worker: int
    epoch_seconds: float
    peak_resident_blocks: int
    peak_bytes: int
    fwd_feature_bytes: int
    bwd_feature_bytes: int
    bwd_gradient_bytes: int
    allreduce_bytes: int
    loss: float
    lr: float
    ledger_ok: bool
    train_acc: Optional[float] = None
    val_acc: Optional[float] = None
    test_acc: Optional[float] = None


class BenchRow(BaseModel):
    mode: BenchMode
    worker: int
    epochs: int
    epoch_seconds: float = Field(..., description="Mean seconds per epoch")
    peak_resident_blocks: int
    peak_bytes: int
    fwd_feature_bytes: int
    bwd_feature_bytes: int
    bwd_gradient_bytes: int
    allreduce_bytes: int
    total_comm_bytes: int = Field(..., description="Feature plus gradient bytes of the last epoch")
    loss: float

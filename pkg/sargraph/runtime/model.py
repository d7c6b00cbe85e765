from typing import Dict, List, Mapping, Union
import logging

import numpy as np

from ..api.models import Activation, LayerConfig, LayerType
from ..core.errors import InputError
from ..core.params import ParamStore
from ..layers.batchnorm import BatchNormState
from ..layers.gat import GATLayer
from ..layers.rgcn import RGCNLayer
from ..layers.sage import GraphSageLayer

logger = logging.getLogger(__name__)

Layer = Union[GraphSageLayer, GATLayer, RGCNLayer]


def build_layer(index: int, config: LayerConfig, activation: Activation, num_relations: int) -> Layer:
    if config.type == LayerType.SAGE:
        return GraphSageLayer(index, config.in_dim, config.out_dim, activation.value)
    if config.type == LayerType.GAT:
        return GATLayer(index, config.in_dim, config.out_dim, config.heads, config.slope, activation.value)
    if config.type == LayerType.RGCN:
        return RGCNLayer(index, config.in_dim, config.out_dim, num_relations, config.num_bases,
                         config.self_weight, activation.value)
    raise InputError(f"unknown layer type {config.type}")


class GnnModel:
    """Layer stack, its parameters and the BatchNorm running statistics"""

    def __init__(self, layer_configs: List[LayerConfig], activations: List[Activation], num_relations: int,
                 dtype=np.float32, seed: int = 0):
        if not layer_configs:
            raise InputError("the model needs at least one layer")
        self.configs = layer_configs
        self.store = ParamStore(dtype)
        self.layers: List[Layer] = []
        self.norms: Dict[int, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        for index, (config, activation) in enumerate(zip(layer_configs, activations), start=1):
            layer = build_layer(index, config, activation, num_relations)
            layer.init_params(self.store, rng)
            if config.batchnorm:
                norm = BatchNormState(f"bn{index}.gamma", f"bn{index}.beta", layer.output_width)
                norm.init_params(self.store)
                self.norms[index] = norm
            self.layers.append(layer)
        logger.info(f"Model with {len(self.layers)} layers, {len(self.store)} parameter tensors")

    @property
    def output_width(self) -> int:
        return self.layers[-1].output_width

    def buffers(self) -> Dict[str, np.ndarray]:
        tensors = {}
        for index, norm in self.norms.items():
            tensors.update(norm.buffers(f"bn{index}"))
        return tensors

    def load_buffers(self, tensors: Mapping[str, np.ndarray]) -> None:
        for index, norm in self.norms.items():
            norm.load_buffers(f"bn{index}", dict(tensors))

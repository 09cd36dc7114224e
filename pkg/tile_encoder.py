# ==================================================
# File: tile_encoder.py
# Trainable MLP from raw tile vectors to unit-norm features
# ==================================================

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

import autodiff as ad
from errors import ConfigError
from pipeline_config import EncoderConfig

logger = logging.getLogger(__name__)

PREFIX = "encoder"

_ACTIVATIONS = {
    "relu": ad.relu,
    "gelu": ad.gelu,
    "linear": lambda x: x,
}


def weight_name(layer: int) -> str:
    return f"{PREFIX}.w{layer}"


def bias_name(layer: int) -> str:
    return f"{PREFIX}.b{layer}"


@dataclass
class EncoderParams:
    """Layer weights and biases plus the freeze flag"""

    config: EncoderConfig
    params: ad.ParameterSet
    frozen: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.config.hidden_dims) + 1

    @property
    def layer_dims(self) -> List[int]:
        return [self.config.input_dim] + list(self.config.hidden_dims) + [self.config.feature_dim]

    def arrays(self) -> Dict[str, np.ndarray]:
        return dict(self.params.arrays)

    def trainable_names(self) -> List[str]:
        return [name for name in self.params if self.params.trainable[name]]

    def leaves(self) -> Dict[str, ad.Tensor]:
        return self.params.leaves()


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> EncoderParams:
    """Seeded fan-based uniform weights, zero biases"""
    config.validate()
    rng = np.random.default_rng(seed)
    dims = [config.input_dim] + list(config.hidden_dims) + [config.feature_dim]
    arrays = {}
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        arrays[weight_name(layer)] = ad.glorot_uniform(rng, fan_in, fan_out, dtype)
        arrays[bias_name(layer)] = np.zeros(fan_out, dtype=dtype)
    return EncoderParams(config, ad.ParameterSet(arrays))


def forward(config: EncoderConfig, leaves: Dict[str, ad.Tensor], tiles: ad.Tensor) -> ad.Tensor:
    """act(xW + b) per hidden layer, a linear output layer, row L2 normalisation"""
    if tiles.ndim != 2 or tiles.shape[1] != config.input_dim:
        raise ConfigError(f"tile vectors must have length {config.input_dim}, got shape {tiles.shape}")
    activation = _ACTIVATIONS[config.activation]
    last = len(config.hidden_dims)
    x = tiles
    for layer in range(last + 1):
        x = ad.add(ad.matmul(x, leaves[weight_name(layer)]), leaves[bias_name(layer)])
        if layer < last:
            x = activation(x)
    return ad.l2_normalize(x)


def encode(params: EncoderParams, tiles, leaves: Optional[Dict[str, ad.Tensor]] = None) -> ad.Tensor:
    """Encode one tile vector or a (n, input_dim) batch.

    Pass ``leaves`` to attach the output to an existing training graph.
    """
    x = ad.as_tensor(tiles, dtype=_param_dtype(params))
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2:
        raise ConfigError(f"tile input must be a vector or matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ConfigError("tile vectors must be finite")
    out = forward(params.config, leaves if leaves is not None else params.leaves(), x)
    return ad.reshape(out, (params.config.feature_dim,)) if single else out


def encode_array(params: EncoderParams, tiles: np.ndarray) -> np.ndarray:
    """Detached features for bank fills and evaluation"""
    return encode(params, np.asarray(tiles)).data.copy()


def set_frozen(params: EncoderParams, frozen: bool) -> EncoderParams:
    """New handle over the same arrays with every requires_grad flag toggled"""
    shared = params.params.with_trainable({name: not frozen for name in params.params})
    return EncoderParams(params.config, shared, frozen)


def unfreeze_top(params: EncoderParams, n_layers: int) -> EncoderParams:
    """Trainable flags on the top n layers only (output side first)"""
    n_layers = max(0, min(n_layers, params.num_layers))
    if n_layers == 0:
        return set_frozen(params, True)
    first = params.num_layers - n_layers
    trainable = {}
    for layer in range(params.num_layers):
        flag = layer >= first
        trainable[weight_name(layer)] = flag
        trainable[bias_name(layer)] = flag
    shared = params.params.with_trainable(trainable)
    logger.debug("encoder_unfreeze layers=%d of %d", n_layers, params.num_layers)
    return EncoderParams(params.config, shared, frozen=False)


def _param_dtype(params: EncoderParams) -> np.dtype:
    return params.params.arrays[weight_name(0)].dtype

# ==================================================
# File: checkpoint.py
# DRSK model checkpoints: config echo, parameters, moments, RNG, stage
# ==================================================

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

import binary_formats as bf
from artifact_store import atomic_write_bytes
from autodiff import ParameterSet
from errors import ConfigError
from optimizer import Adam, AdamMoments
from pipeline_config import Config, ModelDims


@dataclass
class CheckpointPayload:
    config_echo: str
    dims: ModelDims
    epoch: int
    step: int
    stage: int
    rng_state: Dict
    params: Dict[str, np.ndarray]
    moments: Dict[str, AdamMoments]


def encode(payload: CheckpointPayload) -> bytes:
    writer = bf.BinaryWriter(Config.CHECKPOINT_MAGIC)

    # segment: config echo
    writer.string(payload.config_echo)

    # segment: dimensions
    dims = payload.dims
    for value in (dims.input_dim, dims.feature_dim, dims.k, dims.report_dim, dims.num_classes):
        writer.u32(value)

    # segment: progress and RNG
    writer.u32(payload.epoch)
    writer.u64(payload.step)
    writer.u8(payload.stage)
    writer.string(json.dumps(payload.rng_state, sort_keys=True))

    # segment: parameters
    writer.u32(len(payload.params))
    for name, array in payload.params.items():
        writer.string(name)
        writer.tensor(array)

    # segment: Adam moments
    writer.u32(len(payload.moments))
    for name, moments in payload.moments.items():
        writer.string(name)
        writer.u64(moments.step)
        writer.tensor(moments.m)
        writer.tensor(moments.v)

    return writer.seal()


def decode(data: bytes, path: Optional[Union[str, Path]] = None) -> CheckpointPayload:
    reader = bf.BinaryReader(data, Config.CHECKPOINT_MAGIC, path)
    config_echo = reader.string()
    dims = ModelDims(*(reader.u32() for _ in range(5)))
    epoch = reader.u32()
    step = reader.u64()
    stage = reader.u8()
    rng_state = json.loads(reader.string())

    params = {}
    for _ in range(reader.u32()):
        name = reader.string()
        params[name] = reader.tensor()

    moments = {}
    for _ in range(reader.u32()):
        name = reader.string()
        count = reader.u64()
        m = reader.tensor()
        v = reader.tensor()
        moments[name] = AdamMoments(m, v, int(count))

    reader.finish()
    return CheckpointPayload(config_echo, dims, epoch, step, stage, rng_state, params, moments)


def rng_state(rng: np.random.Generator) -> Dict:
    return rng.bit_generator.state


def restore_rng(state: Dict) -> np.random.Generator:
    bit_generator = getattr(np.random, state['bit_generator'])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def collect_params(param_sets: Sequence[ParameterSet]) -> Dict[str, np.ndarray]:
    arrays = {}
    for params in param_sets:
        arrays.update(params.arrays)
    return arrays


def apply_params(param_sets: Sequence[ParameterSet], arrays: Dict[str, np.ndarray]):
    """Copy stored arrays into the template sets; names, shapes and dtypes must agree"""
    expected = collect_params(param_sets)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ConfigError(f"checkpoint parameters do not match the configuration (missing {missing}, unexpected {extra})")
    for params in param_sets:
        for name in params:
            stored = arrays[name]
            if stored.shape != params.arrays[name].shape:
                raise ConfigError(f"checkpoint parameter {name} has shape {stored.shape}, "
                                  f"configuration expects {params.arrays[name].shape}")
            if stored.dtype != params.arrays[name].dtype:
                raise ConfigError(f"checkpoint parameter {name} is {stored.dtype}, "
                                  f"configuration expects {params.arrays[name].dtype}")
            params.replace(name, stored)


def check_dims(stored: ModelDims, expected: ModelDims):
    if stored != expected:
        raise ConfigError(f"checkpoint dimensions {stored} do not match configuration {expected}")


def save(path: Union[str, Path], payload: CheckpointPayload):
    atomic_write_bytes(path, encode(payload))


def load(path: Union[str, Path]) -> CheckpointPayload:
    return decode(bf.read_bytes(path), path)


def restore_optimizer(optimizer: Adam, moments: Dict[str, AdamMoments],
                      params: Dict[str, np.ndarray]) -> Tuple[str, ...]:
    for name, state in moments.items():
        if name not in params or state.m.shape != params[name].shape or state.v.shape != params[name].shape:
            raise ConfigError(f"optimizer moments for {name} do not match the parameters")
    optimizer.load_state(moments)
    return tuple(moments)

# ==================================================
# File: pipeline_config.py
# Constants and typed configuration sections
# ==================================================

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Dict, List, Tuple, Any

import numpy as np

from errors import ConfigError


class Config:
    """Project-wide constants"""

    # Binary formats (little-endian, trailing CRC-64)
    BANK_MAGIC = b"DRSB"
    CODEBOOK_MAGIC = b"DRSC"
    DESCRIPTOR_MAGIC = b"DRSV"
    REPORT_MAGIC = b"DRST"
    CHECKPOINT_MAGIC = b"DRSK"
    FORMAT_VERSION = 1

    # Numerics
    NORM_EPS = 1e-12
    LAYER_NORM_EPS = 1e-5
    UNIT_NORM_TOL = 1e-5
    INITIAL_TEMPERATURE = 1.0 / 0.07
    CLUSTER_EMBED_STD = 0.02

    # Environment
    LOG_ENV_VAR = "DRSL_LOG"
    ENV_PREFIX = "DRSL_"
    LOG_LEVELS = ("error", "info", "debug")

    # Output directory layout
    ARTIFACTS = {
        'run_config': 'run_config.txt',
        'bank': 'bank.drsb',
        'codebook': 'codebook.drsc',
        'checkpoint': 'model.drsk',
        'checkpoint_bank': 'model_bank.drsb',
        'metrics': 'metrics.jsonl',
        'evaluation': 'evaluation.json',
        'descriptors': 'descriptors.drsv',
        'ablation': 'ablation.csv',
    }

    # Which command produces which artifact
    PRODUCERS = {
        'bank': 'prepare',
        'codebook': 'prepare',
        'checkpoint': 'train',
        'checkpoint_bank': 'train',
        'manifest': 'synth',
    }

    ACTIVATIONS = ("relu", "gelu", "linear")
    DTYPES = ("float32", "float64")


@dataclass
class EncoderConfig:
    input_dim: int = 32
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = 16
    activation: str = "gelu"

    def validate(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_dims:
            raise ConfigError("encoder needs at least one hidden layer")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.activation not in Config.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class HeadConfig:
    num_heads: int = 1
    num_layers: int = 1
    ff_hidden: int = 0           # 0 -> 2 * feature_dim
    classifier_hidden: int = 0   # 0 -> feature_dim
    intra_normalize: bool = False
    report_less_negatives: bool = False
    # learned vector per cluster slot, added to that slot's token
    cluster_embedding: bool = True

    def validate(self):
        if self.num_heads < 1 or self.num_layers < 1:
            raise ConfigError("num_heads and num_layers must be >= 1")
        if self.ff_hidden < 0 or self.classifier_hidden < 0:
            raise ConfigError("hidden sizes must be >= 0")


@dataclass
class CodebookConfig:
    k: int = 64
    max_iters: int = 100
    tol: float = 1e-6
    n_init: int = 1

    def validate(self):
        if self.k < 2:
            raise ConfigError(f"codebook k must be >= 2, got {self.k}")
        if self.max_iters < 1 or self.n_init < 1:
            raise ConfigError("max_iters and n_init must be >= 1")
        if self.tol < 0:
            raise ConfigError("tol must be non-negative")


@dataclass
class TrainConfig:
    batch_size: int = 64
    tiles_per_slide: int = 10
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-5
    freeze_epochs: int = 10
    loss_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    end_to_end: bool = True
    gradual_unfreeze: bool = False
    train_fraction: float = 0.5
    reports_to_train: bool = False

    def validate(self):
        if self.tiles_per_slide < 1:
            raise ConfigError(f"tiles_per_slide must be >= 1, got {self.tiles_per_slide}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or not 0 <= self.freeze_epochs <= self.epochs:
            raise ConfigError(
                f"need 0 <= freeze_epochs <= epochs, got {self.freeze_epochs} / {self.epochs}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


SECTIONS = ('encoder', 'head', 'codebook', 'train')


@dataclass
class RunConfig:
    """Resolved configuration of one run; every module reads from here"""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    dtype: str = "float32"
    manifest: str = ""
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.dtype not in Config.DTYPES:
            raise ConfigError(f"dtype must be one of {Config.DTYPES}, got {self.dtype!r}")
        return self

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @classmethod
    def key_index(cls) -> Dict[str, Tuple[str, Any]]:
        """Flat key -> (section or '', default value) for key=value files"""
        index = {}
        defaults = cls()
        for name in SECTIONS:
            section = getattr(defaults, name)
            for f in fields(section):
                index[f.name] = (name, getattr(section, f.name))
        for f in fields(cls):
            if f.name not in SECTIONS:
                index[f.name] = ('', getattr(defaults, f.name))
        return index

    def get(self, key: str) -> Any:
        section, _ = self.key_index()[key]
        holder = getattr(self, section) if section else self
        return getattr(holder, key)

    def set(self, key: str, value: Any):
        section, _ = self.key_index()[key]
        holder = getattr(self, section) if section else self
        setattr(holder, key, value)

    def to_dict(self) -> Dict[str, Any]:
        flat = {}
        for key in self.key_index():
            flat[key] = self.get(key)
        return flat

    def to_text(self) -> str:
        """Canonical key=value echo; parsed back by ConfigLoader.from_text"""
        lines = []
        for key, value in sorted(self.to_dict().items()):
            lines.append(f"{key}={format_value(value)}")
        return "\n".join(lines) + "\n"

    def copy(self) -> "RunConfig":
        return RunConfig(
            encoder=EncoderConfig(**asdict(self.encoder)),
            head=HeadConfig(**asdict(self.head)),
            codebook=CodebookConfig(**asdict(self.codebook)),
            train=TrainConfig(**asdict(self.train)),
            seed=self.seed, dtype=self.dtype,
            manifest=self.manifest, output_dir=self.output_dir,
        )


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ModelDims:
    """Dimensions fixed by config plus dataset (K, d, t, classes)"""

    input_dim: int
    feature_dim: int
    k: int
    report_dim: int
    num_classes: int

    @classmethod
    def from_run(cls, run: RunConfig, report_dim: int, num_classes: int) -> "ModelDims":
        return cls(run.encoder.input_dim, run.encoder.feature_dim, run.codebook.k,
                   report_dim, num_classes)

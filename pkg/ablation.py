# ==================================================
# File: ablation.py
# Sweep harness over codebook size, sampling, batch, loss weight and freezing
# ==================================================

import itertools
import logging
import time
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from artifact_store import atomic_write_text
from data_io import Dataset, split
from errors import ConfigError
from pipeline_config import RunConfig
from trainer import Trainer, prepare

logger = logging.getLogger(__name__)

AXES = ('k', 'tiles_per_slide', 'batch_size', 'loss_weight', 'end_to_end')


def cell_config(base: RunConfig, overrides: Mapping[str, Any], seed: Optional[int] = None) -> RunConfig:
    run = base.copy()
    index = RunConfig.key_index()
    for key, value in overrides.items():
        if key not in index:
            raise ConfigError(f"unknown ablation axis {key!r}")
        run.set(key, value)
    if seed is not None:
        run.seed = seed
    return run.validate()


def run_cell(base: RunConfig, dataset: Dataset, splits: Tuple[Dataset, Dataset],
             overrides: Mapping[str, Any], seed: Optional[int] = None) -> Dict[str, Any]:
    """prepare -> train -> evaluate for one configuration; returns one row"""
    run = cell_config(base, overrides, seed)
    train_set, test_set = splits
    start = time.perf_counter()

    bank, codebook = prepare(dataset, run)
    trainer = Trainer(run, train_set, bank, codebook)
    reports = trainer.fit()
    result = trainer.evaluate(test_set)

    row: Dict[str, Any] = dict(overrides)
    row.update({
        'seed': run.seed,
        'auc': result.auc,
        'weighted_f1': result.weighted_f1,
        'loss_total': reports[-1].loss_total if reports else float('nan'),
        'loss_cls': reports[-1].loss_cls if reports else float('nan'),
        'loss_contrastive': reports[-1].loss_contrastive if reports else float('nan'),
        'wall_time_s': time.perf_counter() - start,
    })
    logger.info("ablation_cell %s auc=%.4f f1=%.4f", " ".join(f"{k}={v}" for k, v in overrides.items()),
                result.auc, result.weighted_f1)
    return row


def sweep(base: RunConfig, dataset: Dataset, axes: Mapping[str, Sequence[Any]],
          seeds: Sequence[int] = (0,)) -> pd.DataFrame:
    """Full grid over the given axes; one row per (cell, seed)"""
    names = list(axes)
    for name in names:
        if name not in AXES:
            raise ConfigError(f"unknown ablation axis {name!r}; expected one of {AXES}")

    rows = []
    for seed in seeds:
        splits = split(dataset, base.train.train_fraction, seed, base.train.reports_to_train)
        for values in itertools.product(*(axes[n] for n in names)):
            rows.append(run_cell(base, dataset, splits, dict(zip(names, values)), seed))
    return pd.DataFrame(rows)


def compare_contrastive(base: RunConfig, dataset: Dataset, seeds: Sequence[int]) -> Tuple[float, float]:
    """Median test AUC with the contrastive term on and off"""
    frame = sweep(base, dataset, {'loss_weight': [1.0, 0.0]}, seeds)
    with_loss = float(np.median(frame.loc[frame['loss_weight'] == 1.0, 'auc']))
    without = float(np.median(frame.loc[frame['loss_weight'] == 0.0, 'auc']))
    return with_loss, without


def write_table(frame: pd.DataFrame, path) -> None:
    atomic_write_text(path, frame.to_csv(index=False))

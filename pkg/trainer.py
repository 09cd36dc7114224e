# ==================================================
# File: trainer.py
# Preparation, staged training and testing of the slide pipeline
# ==================================================

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

import autodiff as ad
import checkpoint
import codebook as cbk
import contrastive
import slide_head
import tile_encoder
import vlad
from codebook import Codebook
from data_io import Dataset, SlideRecord
from errors import ConfigError, DrslError
from memory_bank import MemoryBank
from metrics import EvalResult, evaluate_predictions
from optimizer import Adam
from pipeline_config import ModelDims, RunConfig

logger = logging.getLogger(__name__)

STAGE_FROZEN = 1
STAGE_JOINT = 2


@dataclass
class TrainState:
    """Every trainable parameter plus optimizer moments, progress and RNG"""

    encoder: tile_encoder.EncoderParams
    head: slide_head.SlideHeadParams
    temperatures: ad.ParameterSet
    optimizer: Adam
    rng: np.random.Generator
    dims: ModelDims
    epoch: int = 0
    step: int = 0
    stage: int = STAGE_FROZEN

    def param_sets(self) -> List[ad.ParameterSet]:
        return [self.encoder.params, self.head.params, self.temperatures]

    def leaves(self) -> Dict[str, ad.Tensor]:
        named = {}
        for params in self.param_sets():
            named.update(params.leaves())
        return named

    def arrays(self) -> Dict[str, np.ndarray]:
        return checkpoint.collect_params(self.param_sets())

    def sigmas(self) -> Tuple[float, float]:
        return contrastive.sigmas(self.temperatures)


def model_dims(run: RunConfig, dataset: Dataset) -> ModelDims:
    if dataset.input_dim != run.encoder.input_dim:
        raise ConfigError(f"dataset input_dim {dataset.input_dim} does not match encoder input_dim {run.encoder.input_dim}")
    report_dim = dataset.report_dim or run.encoder.feature_dim
    return ModelDims.from_run(run, report_dim, dataset.num_classes)


def init_state(run: RunConfig, dims: ModelDims) -> TrainState:
    dtype = run.np_dtype
    encoder = tile_encoder.init_params(run.encoder, run.seed, dtype)
    head = slide_head.init_params(run.head, dims.feature_dim, dims.report_dim, dims.num_classes, run.seed, dtype,
                                  num_clusters=dims.k)
    temperatures = contrastive.init_temperatures(dtype)
    optimizer = Adam.from_config(run.train, no_decay=contrastive.TEMPERATURE_NAMES + slide_head.NO_DECAY)
    rng = np.random.default_rng([run.seed, 2])
    state = TrainState(encoder, head, temperatures, optimizer, rng, dims)
    apply_stage(state, run, 0)
    return state


def stage_for_epoch(run: RunConfig, epoch: int) -> int:
    if not run.train.end_to_end or epoch < run.train.freeze_epochs:
        return STAGE_FROZEN
    return STAGE_JOINT


def apply_stage(state: TrainState, run: RunConfig, epoch: int):
    """Freeze flags for the given epoch"""
    state.stage = stage_for_epoch(run, epoch)
    if state.stage == STAGE_FROZEN:
        state.encoder = tile_encoder.set_frozen(state.encoder, True)
    elif run.train.gradual_unfreeze:
        layers = epoch - run.train.freeze_epochs + 1
        state.encoder = tile_encoder.unfreeze_top(state.encoder, layers)
    else:
        state.encoder = tile_encoder.set_frozen(state.encoder, False)


# --------------------------------------------------
# Preparation
# --------------------------------------------------

def prepare(dataset: Dataset, run: RunConfig, state: Optional[TrainState] = None) -> Tuple[MemoryBank, Codebook]:
    """Encode every tile with the initial encoder, fill the bank, build the codebook"""
    if state is None:
        state = init_state(run, model_dims(run, dataset))
    total = 0
    bank = MemoryBank(run.encoder.feature_dim)
    for record in dataset:
        try:
            features = tile_encoder.encode_array(state.encoder, record.tiles)
        except ConfigError as e:
            raise ConfigError(f"slide {record.slide_id}: {e}") from e
        bank.insert_slide(record.slide_id, features, declared=record.num_tiles)
        total += features.shape[0]

    if total < run.codebook.k:
        raise ConfigError(f"codebook k={run.codebook.k} exceeds the {total} tiles available")
    codebook = cbk.build(bank.all_features(), run.codebook.k, run.codebook.max_iters,
                         run.codebook.tol, run.seed, run.codebook.n_init)
    logger.info("prepared slides=%d tiles=%d k=%d", bank.slide_count(), total, codebook.k)
    return bank, codebook


# --------------------------------------------------
# Training
# --------------------------------------------------

@dataclass
class SlideSample:
    """Inputs of one slide's forward pass within a batch"""

    slide_id: str
    label: int
    sampled_indices: np.ndarray
    sampled_tiles: np.ndarray
    stale_indices: np.ndarray
    stale_features: np.ndarray
    report: Optional[np.ndarray]


@dataclass
class BatchLoss:
    total: ad.Tensor
    classification: ad.Tensor
    contrastive: ad.Tensor
    fresh: Dict[str, Tuple[np.ndarray, np.ndarray]]
    logits: List[ad.Tensor] = field(default_factory=list)


@dataclass
class EpochReport:
    epoch: int
    stage: int
    loss_total: float
    loss_cls: float
    loss_contrastive: float
    sigma1: float
    sigma2: float
    wall_time_s: float
    steps: int
    sampled_tiles: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def record(self) -> Dict:
        return {
            'epoch': self.epoch,
            'stage': self.stage,
            'loss_total': self.loss_total,
            'loss_cls': self.loss_cls,
            'loss_contrastive': self.loss_contrastive,
            'sigma1': self.sigma1,
            'sigma2': self.sigma2,
            'wall_time_s': self.wall_time_s,
        }


def sample_slide(record: SlideRecord, bank: MemoryBank, tiles_per_slide: int,
                 rng: np.random.Generator) -> SlideSample:
    """r tiles without replacement (all of them when the slide has fewer)"""
    indices, features = bank.get_slide_indexed(record.slide_id)
    count = indices.size
    take = min(tiles_per_slide, count)
    chosen = np.sort(rng.choice(count, size=take, replace=False))
    rest = np.setdiff1d(np.arange(count), chosen, assume_unique=True)
    tiles = record.tiles
    return SlideSample(
        slide_id=record.slide_id,
        label=record.label,
        sampled_indices=indices[chosen],
        sampled_tiles=tiles[indices[chosen]],
        stale_indices=indices[rest],
        stale_features=features[rest],
        report=record.report,
    )


def compute_batch_loss(run: RunConfig, state: TrainState, cb: Codebook, samples: Sequence[SlideSample],
                       leaves: Optional[Dict[str, ad.Tensor]] = None) -> BatchLoss:
    """total = L_cls + lambda * L_contrastive over one batch; pure in its inputs"""
    leaves = leaves if leaves is not None else state.leaves()
    dtype = run.np_dtype
    logits_rows, projections, fresh = [], [], {}

    for sample in samples:
        features = tile_encoder.forward(run.encoder, leaves, ad.Tensor(sample.sampled_tiles, dtype=dtype))
        descriptor = vlad.encode_slide(cb, sample.sampled_indices, features,
                                       sample.stale_indices, sample.stale_features.astype(dtype),
                                       intra_normalize=run.head.intra_normalize, dtype=dtype)
        embedding = slide_head.enhance(state.head, descriptor.blocks, leaves)
        logits = slide_head.classify(state.head, embedding, leaves)
        logits_rows.append(ad.reshape(logits, (1, state.dims.num_classes)))
        projections.append(ad.reshape(embedding.h_proj, (1, state.dims.report_dim)))
        fresh[sample.slide_id] = (sample.sampled_indices, features.data)

    labels = [s.label for s in samples]
    loss_cls = ad.cross_entropy(ad.concat(logits_rows, axis=0), labels)

    reports, mask = contrastive.report_matrix([s.report for s in samples], state.dims.report_dim, dtype)
    loss_con = contrastive.batch_loss(ad.concat(projections, axis=0), reports, mask, leaves,
                                      run.head.report_less_negatives)
    total = ad.add(loss_cls, ad.scale(loss_con, run.train.loss_weight))
    return BatchLoss(total, loss_cls, loss_con, fresh, logits_rows)


def train_step(run: RunConfig, state: TrainState, bank: MemoryBank, cb: Codebook,
               samples: Sequence[SlideSample]) -> BatchLoss:
    leaves = state.leaves()
    batch = compute_batch_loss(run, state, cb, samples, leaves)
    grads = ad.backward(batch.total)

    updates = []
    for slide_id, (indices, features) in batch.fresh.items():
        for index, row in zip(indices, features):
            updates.append((slide_id, int(index), row))
    bank.replace_batch(updates)

    state.optimizer.step(state.param_sets(), {name: grads.get(leaf) for name, leaf in leaves.items()})
    state.step += 1
    return batch


def train_epoch(state: TrainState, bank: MemoryBank, cb: Codebook, dataset: Dataset,
                run: RunConfig) -> EpochReport:
    """One pass over shuffled slides in batches of b; updates bank and parameters"""
    start = time.perf_counter()
    epoch = state.epoch
    apply_stage(state, run, epoch)

    order = state.rng.permutation(len(dataset))
    records = dataset.records
    batch_size = run.train.batch_size
    totals = np.zeros(3, dtype=np.float64)
    steps = 0
    sampled: Dict[str, np.ndarray] = {}

    for begin in range(0, len(order), batch_size):
        batch_records = [records[i] for i in order[begin:begin + batch_size]]
        samples = [sample_slide(r, bank, run.train.tiles_per_slide, state.rng) for r in batch_records]
        batch = train_step(run, state, bank, cb, samples)
        for sample in samples:
            sampled[sample.slide_id] = sample.sampled_indices
        totals += (batch.total.item(), batch.classification.item(), batch.contrastive.item())
        steps += 1
        logger.debug("step=%d loss_total=%.6f loss_cls=%.6f loss_contrastive=%.6f",
                     state.step, *(t.item() for t in (batch.total, batch.classification, batch.contrastive)))

    means = totals / max(steps, 1)
    sigma1, sigma2 = state.sigmas()
    state.epoch += 1
    report = EpochReport(epoch, state.stage, float(means[0]), float(means[1]), float(means[2]),
                         sigma1, sigma2, time.perf_counter() - start, steps, sampled)
    logger.info("epoch=%d stage=%d loss_total=%.6f loss_cls=%.6f loss_contrastive=%.6f sigma1=%.4f sigma2=%.4f",
                report.epoch, report.stage, report.loss_total, report.loss_cls,
                report.loss_contrastive, sigma1, sigma2)
    return report


# --------------------------------------------------
# Testing
# --------------------------------------------------

def slide_probabilities(state: TrainState, cb: Codebook, record: SlideRecord, run: RunConfig) -> np.ndarray:
    """All tiles encoded fresh, no bank and no sampling"""
    frozen = tile_encoder.set_frozen(state.encoder, True)
    features = tile_encoder.encode(frozen, record.tiles).data
    descriptor = vlad.encode_slide(cb, stale_indices=np.arange(features.shape[0]), stale_features=features,
                                   intra_normalize=run.head.intra_normalize, dtype=features.dtype)
    head = dataclasses.replace(state.head, params=state.head.params.with_trainable({}))
    logits = slide_head.classify(head, slide_head.enhance(head, descriptor.blocks))
    return special.softmax(logits.data.astype(np.float64))


def evaluate(state: TrainState, cb: Codebook, dataset: Dataset, run: RunConfig) -> EvalResult:
    probabilities = np.stack([slide_probabilities(state, cb, r, run) for r in dataset])
    result = evaluate_predictions(dataset.ids, dataset.labels, probabilities, dataset.num_classes)
    logger.info("evaluated slides=%d auc=%.4f weighted_f1=%.4f", len(dataset), result.auc, result.weighted_f1)
    return result


def slide_descriptors(state: TrainState, cb: Codebook, dataset: Dataset, run: RunConfig) -> Dict[str, np.ndarray]:
    frozen = tile_encoder.set_frozen(state.encoder, True)
    descriptors = {}
    for record in dataset:
        features = tile_encoder.encode(frozen, record.tiles).data
        descriptors[record.slide_id] = vlad.encode_all(cb, features, run.head.intra_normalize)
    return descriptors


# --------------------------------------------------
# Checkpoints
# --------------------------------------------------

def to_payload(state: TrainState, run: RunConfig) -> checkpoint.CheckpointPayload:
    return checkpoint.CheckpointPayload(
        config_echo=run.to_text(),
        dims=state.dims,
        epoch=state.epoch,
        step=state.step,
        stage=state.stage,
        rng_state=checkpoint.rng_state(state.rng),
        params=state.arrays(),
        moments=state.optimizer.state_arrays(),
    )


def save_state(state: TrainState, run: RunConfig, path: Path):
    checkpoint.save(path, to_payload(state, run))
    logger.info("checkpoint_saved path=%s epoch=%d step=%d", path, state.epoch, state.step)


def load_state(path: Path, run: RunConfig, dims: ModelDims) -> TrainState:
    """Rebuild the configured state, then overwrite it from the checkpoint"""
    payload = checkpoint.load(path)
    checkpoint.check_dims(payload.dims, dims)
    state = init_state(run, dims)
    checkpoint.apply_params(state.param_sets(), payload.params)
    checkpoint.restore_optimizer(state.optimizer, payload.moments, state.arrays())
    state.rng = checkpoint.restore_rng(payload.rng_state)
    state.epoch = payload.epoch
    state.step = payload.step
    state.stage = payload.stage
    logger.info("checkpoint_loaded path=%s epoch=%d step=%d", path, state.epoch, state.step)
    return state


class Trainer:
    """Runs epochs up to the configured count, logging and checkpointing each one"""

    def __init__(self, run: RunConfig, dataset: Dataset, bank: MemoryBank, cb: Codebook,
                 state: Optional[TrainState] = None):
        self.run = run
        self.dataset = dataset
        self.bank = bank
        self.codebook = cb
        self.dims = model_dims(run, dataset)
        if cb.dim != self.dims.feature_dim or bank.feature_dim != self.dims.feature_dim:
            raise ConfigError(f"bank/codebook dimension {bank.feature_dim}/{cb.dim} "
                              f"does not match feature_dim {self.dims.feature_dim}")
        if cb.k != self.dims.k:
            raise ConfigError(f"codebook has k={cb.k}, configuration expects {self.dims.k}")
        stored = set(bank.slide_ids())
        missing = [s for s in dataset.ids if s not in stored]
        if missing:
            raise DrslError(f"bank has no features for {len(missing)} slides (first: {missing[0]})")
        self.state = state if state is not None else init_state(run, self.dims)

    def fit(self, on_epoch: Optional[Callable[[EpochReport, TrainState], None]] = None) -> List[EpochReport]:
        reports = []
        while self.state.epoch < self.run.train.epochs:
            report = train_epoch(self.state, self.bank, self.codebook, self.dataset, self.run)
            reports.append(report)
            if on_epoch is not None:
                on_epoch(report, self.state)
        return reports

    def evaluate(self, dataset: Dataset) -> EvalResult:
        return evaluate(self.state, self.codebook, dataset, self.run)

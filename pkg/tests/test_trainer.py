import math

import numpy as np
import pytest

import autodiff as ad
import trainer
from data_io import SyntheticSpec, generate, split
from debug_tools import end_to_end_grad_check, gradient_check_instance
from errors import ConfigError, DrslError
from factories import small_run, small_spec
from memory_bank import MemoryBank
from pipeline_config import RunConfig


def fit(run, dataset, bank, codebook, state=None):
    t = trainer.Trainer(run, dataset, bank, codebook, state)
    return t, t.fit()


def test_stage_schedule():
    run = small_run(epochs=5, freeze_epochs=2)
    assert [trainer.stage_for_epoch(run, e) for e in range(5)] == [1, 1, 2, 2, 2]
    run.train.end_to_end = False
    assert {trainer.stage_for_epoch(run, e) for e in range(5)} == {trainer.STAGE_FROZEN}


def test_gradual_unfreeze_opens_one_layer_per_epoch(run_config, dataset):
    run_config.train.gradual_unfreeze = True
    state = trainer.init_state(run_config, trainer.model_dims(run_config, dataset))
    trainer.apply_stage(state, run_config, run_config.train.freeze_epochs)
    assert len(state.encoder.trainable_names()) == 2
    trainer.apply_stage(state, run_config, run_config.train.freeze_epochs + 1)
    assert len(state.encoder.trainable_names()) == 4


def test_prepare_fills_bank_for_every_slide(prepared):
    run, dataset, bank, codebook = prepared
    assert set(bank.slide_ids()) == set(dataset.ids)
    assert bank.total_tiles() == sum(r.num_tiles for r in dataset)
    assert codebook.k == run.codebook.k
    assert codebook.dim == run.encoder.feature_dim


def test_prepare_rejects_k_above_tile_count(dataset):
    with pytest.raises(ConfigError):
        trainer.prepare(dataset, small_run(k=1000))


def test_input_dim_mismatch(dataset):
    run = small_run()
    run.encoder.input_dim = 7
    with pytest.raises(ConfigError):
        trainer.model_dims(run, dataset)


def test_sampling_takes_r_distinct_tiles(prepared, rng):
    run, dataset, bank, _ = prepared
    record = dataset.records[0]
    sample = trainer.sample_slide(record, bank, 3, rng)
    assert sample.sampled_indices.size == 3
    assert np.unique(sample.sampled_indices).size == 3
    assert sample.sampled_indices.size + sample.stale_indices.size == record.num_tiles
    np.testing.assert_array_equal(sample.sampled_tiles, record.tiles[sample.sampled_indices])


def test_short_slide_samples_every_tile(prepared, rng):
    _, dataset, bank, _ = prepared
    record = dataset.records[0]
    sample = trainer.sample_slide(record, bank, 500, rng)
    assert sample.stale_indices.size == 0
    assert sample.sampled_indices.tolist() == list(range(record.num_tiles))


def test_frozen_stage_keeps_encoder_and_lowers_classification_loss():
    dataset = generate(small_spec(signal_fraction=0.5))
    run = small_run(epochs=3, freeze_epochs=3, batch_size=len(dataset), loss_weight=0.0, lr=3e-3)
    bank, codebook = trainer.prepare(dataset, run)
    t = trainer.Trainer(run, dataset, bank, codebook)
    before = {k: v.copy() for k, v in t.state.encoder.arrays().items()}

    reports = t.fit()

    after = t.state.encoder.arrays()
    assert all(after[k].tobytes() == before[k].tobytes() for k in before)
    losses = [r.loss_cls for r in reports]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert {r.stage for r in reports} == {trainer.STAGE_FROZEN}


def test_epoch_touches_only_sampled_bank_entries():
    dataset = generate(small_spec(min_tiles=25, max_tiles=25))
    run = small_run(epochs=1, freeze_epochs=0, tiles_per_slide=10, batch_size=2)
    bank, codebook = trainer.prepare(dataset, run)
    t = trainer.Trainer(run, dataset, bank, codebook)
    before = bank.dump()

    (report,) = t.fit()

    per_slide = {s: {(s, int(i)) for i in indices} for s, indices in report.sampled_tiles.items()}
    sampled = set().union(*per_slide.values())
    assert len(sampled) == 10 * len(dataset)
    changed = set(bank.changed_entries(before))
    assert changed <= sampled

    # the first batch is re-encoded with the starting parameters, so its entries stay equal
    untouched = [s for s, entries in per_slide.items() if not entries & changed]
    assert len(untouched) == run.train.batch_size
    assert all(entries <= changed for s, entries in per_slide.items() if s not in untouched)


def test_end_to_end_gradients_match_finite_differences():
    run, state, codebook, samples = gradient_check_instance(seed=0)
    assert any(s.report is not None for s in samples)
    report, names = end_to_end_grad_check(run, state, codebook, samples, tol=1e-4)
    assert report.passed, (names[report.worst_param], report)
    assert any(n.startswith("encoder.") for n in names)
    assert "temperature.log_sigma1" in names


def test_batch_loss_is_pure(prepared, rng):
    run, dataset, bank, codebook = prepared
    state = trainer.init_state(run, trainer.model_dims(run, dataset))
    samples = [trainer.sample_slide(r, bank, 3, rng) for r in dataset.records[:4]]
    a = trainer.compute_batch_loss(run, state, codebook, samples).total.item()
    b = trainer.compute_batch_loss(run, state, codebook, samples).total.item()
    assert a == b


def test_zero_loss_weight_ignores_contrastive_term(prepared, rng):
    run, dataset, bank, codebook = prepared
    run.train.loss_weight = 0.0
    state = trainer.init_state(run, trainer.model_dims(run, dataset))
    samples = [trainer.sample_slide(r, bank, 3, rng) for r in dataset.records[:4]]
    batch = trainer.compute_batch_loss(run, state, codebook, samples)
    assert batch.total.item() == batch.classification.item()


def test_zero_logits_give_log_classes():
    logits = ad.Tensor(np.zeros((3, 5)))
    assert ad.cross_entropy(logits, [0, 4, 2]).item() == pytest.approx(math.log(5), abs=1e-9)


def test_loss_weight_is_irrelevant_without_reports():
    dataset = generate(small_spec(report_fraction=0.0))
    outcomes = []
    for weight in (0.0, 1.0):
        run = small_run(epochs=3, freeze_epochs=1, loss_weight=weight)
        bank, codebook = trainer.prepare(dataset, run)
        t, reports = fit(run, dataset, bank, codebook)
        outcomes.append(([r.loss_total for r in reports], t.state.arrays()))
    (losses_a, arrays_a), (losses_b, arrays_b) = outcomes
    assert losses_a == losses_b
    assert all(arrays_a[k].tobytes() == arrays_b[k].tobytes() for k in arrays_a)


def test_evaluation_is_repeatable(prepared):
    run, dataset, bank, codebook = prepared
    t = trainer.Trainer(run, dataset, bank, codebook)
    t.fit()
    first, second = t.evaluate(dataset), t.evaluate(dataset)
    assert (first.auc, first.weighted_f1) == (second.auc, second.weighted_f1)
    assert first.per_slide.equals(second.per_slide)


def test_frozen_stage_moves_everything_but_the_encoder(dataset):
    run = small_run(epochs=1, freeze_epochs=1)
    bank, codebook = trainer.prepare(dataset, run)
    t = trainer.Trainer(run, dataset, bank, codebook)
    before = {k: v.copy() for k, v in t.state.arrays().items()}
    t.fit()
    after = t.state.arrays()
    moved = {k for k in before if after[k].tobytes() != before[k].tobytes()}
    assert not {k for k in moved if k.startswith("encoder.")}
    assert {k for k in before if not k.startswith("encoder.")} <= moved
    assert {"head.proj.w", "head.cls.w2", "temperature.log_sigma1", "temperature.log_sigma2"} <= moved


def test_first_joint_step_reaches_the_encoder(prepared, rng):
    run, dataset, bank, codebook = prepared
    run.train.freeze_epochs = 0
    state = trainer.init_state(run, trainer.model_dims(run, dataset))
    samples = [trainer.sample_slide(r, bank, 3, rng) for r in dataset.records[:4]]
    leaves = state.leaves()
    grads = ad.backward(trainer.compute_batch_loss(run, state, codebook, samples, leaves).total)
    encoder_leaves = {n: leaf for n, leaf in leaves.items() if n.startswith("encoder.")}
    assert encoder_leaves
    assert all(np.any(grads[leaf]) for leaf in encoder_leaves.values())


def test_trainer_rejects_codebook_of_other_size(prepared):
    run, dataset, bank, codebook = prepared
    with pytest.raises(ConfigError):
        trainer.Trainer(small_run(k=4), dataset, bank, codebook)


def test_trainer_needs_bank_rows_for_every_slide(prepared):
    run, dataset, _, codebook = prepared
    with pytest.raises(DrslError):
        trainer.Trainer(run, dataset, MemoryBank(run.encoder.feature_dim), codebook)


# --------------------------------------------------
# determinism and resume
# --------------------------------------------------

def test_same_seed_gives_identical_checkpoints(dataset, tmp_path):
    paths = []
    for name in ("a", "b"):
        run = small_run(epochs=3, freeze_epochs=1)
        bank, codebook = trainer.prepare(dataset, run)
        t, _ = fit(run, dataset, bank, codebook)
        path = tmp_path / f"{name}.drsk"
        trainer.save_state(t.state, run, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_resume_matches_straight_run(dataset, tmp_path):
    straight_run = small_run(epochs=6, freeze_epochs=2)
    bank, codebook = trainer.prepare(dataset, straight_run)
    straight, straight_reports = fit(straight_run, dataset, bank, codebook)

    first_run = small_run(epochs=3, freeze_epochs=2)
    bank, codebook = trainer.prepare(dataset, first_run)
    first, _ = fit(first_run, dataset, bank, codebook)
    trainer.save_state(first.state, first_run, tmp_path / "model.drsk")
    bank.save(tmp_path / "bank.drsb")

    resumed_run = small_run(epochs=6, freeze_epochs=2)
    dims = trainer.model_dims(resumed_run, dataset)
    state = trainer.load_state(tmp_path / "model.drsk", resumed_run, dims)
    resumed, resumed_reports = fit(resumed_run, dataset, MemoryBank.load(tmp_path / "bank.drsb"), codebook, state)

    assert [r.epoch for r in resumed_reports] == [3, 4, 5]
    assert [r.loss_total for r in resumed_reports] == [r.loss_total for r in straight_reports[3:]]
    final = resumed.state.arrays()
    assert all(final[k].tobytes() == v.tobytes() for k, v in straight.state.arrays().items())


def test_checkpoint_of_other_dimensions_is_rejected(prepared, tmp_path):
    run, dataset, bank, codebook = prepared
    state = trainer.init_state(run, trainer.model_dims(run, dataset))
    trainer.save_state(state, run, tmp_path / "model.drsk")
    other = small_run(k=4)
    with pytest.raises(ConfigError):
        trainer.load_state(tmp_path / "model.drsk", other, trainer.model_dims(other, dataset))


# --------------------------------------------------
# testing
# --------------------------------------------------

def test_probabilities_sum_to_one(prepared):
    run, dataset, bank, codebook = prepared
    state = trainer.init_state(run, trainer.model_dims(run, dataset))
    p = trainer.slide_probabilities(state, codebook, dataset.records[0], run)
    assert p.shape == (2,)
    assert p.sum() == pytest.approx(1.0)


def test_descriptors_are_unit_length(prepared):
    run, dataset, bank, codebook = prepared
    state = trainer.init_state(run, trainer.model_dims(run, dataset))
    descriptors = trainer.slide_descriptors(state, codebook, dataset, run)
    assert list(descriptors) == dataset.ids
    for flat in descriptors.values():
        assert flat.shape == (run.codebook.k * run.encoder.feature_dim,)
        assert np.linalg.norm(flat) == pytest.approx(1.0, abs=1e-9)


def acceptance_run(seed: int) -> RunConfig:
    """Synthetic learning preset: K=16, 30 epochs with the first 10 frozen, 20 fresh tiles per slide"""
    run = RunConfig(seed=seed, dtype="float32")
    run.codebook.k = 16
    run.train.epochs, run.train.freeze_epochs = 30, 10
    run.train.batch_size, run.train.tiles_per_slide = 4, 20
    run.train.lr = 3e-3
    return run.validate()


@pytest.mark.slow
def test_synthetic_task_is_learned():
    aucs, f1s = [], []
    for seed in range(3):
        dataset = generate(SyntheticSpec(seed=seed))
        run = acceptance_run(seed)
        train_set, test_set = split(dataset, 0.5, seed)
        bank, codebook = trainer.prepare(dataset, run)
        t, _ = fit(run, train_set, bank, codebook)
        result = t.evaluate(test_set)
        aucs.append(result.auc)
        f1s.append(result.weighted_f1)
    assert np.median(aucs) >= 0.95
    assert np.median(f1s) >= 0.90

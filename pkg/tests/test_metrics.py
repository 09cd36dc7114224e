import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

import metrics
from errors import MetricError


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_perfect_and_inverted_rankings():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_all_ties_give_one_half():
    assert metrics.roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_random_instances_match_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        # coarse scores so ties occur
        scores = np.round(rng.random(n), 1)
        assert metrics.roc_auc(scores, labels) == pair_count_auc(scores, labels)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=40), st.integers(0, 1000))
def test_auc_agrees_with_sklearn(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, size=len(scores))
    labels[:2] = [0, 1]
    assert metrics.roc_auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_single_class_auc_is_an_error():
    with pytest.raises(MetricError):
        metrics.roc_auc([0.1, 0.2], [1, 1])


def test_non_binary_labels_are_an_error():
    with pytest.raises(MetricError):
        metrics.roc_auc([0.1, 0.2, 0.3], [0, 1, 2])


def test_length_mismatch():
    with pytest.raises(MetricError):
        metrics.roc_auc([0.1, 0.2], [0, 1, 1])


def test_confusion_rows_are_true_classes():
    matrix = metrics.confusion_matrix([0, 1, 1, 2], [0, 0, 1, 2], 3)
    np.testing.assert_array_equal(matrix, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])


def test_class_never_predicted_has_zero_f1():
    f1 = metrics.per_class_f1([0, 0, 0], [0, 1, 0], 2)
    assert f1[1] == 0.0
    assert f1[0] == pytest.approx(0.8)


def direct_weighted_f1(predictions, labels, num_classes):
    total = 0.0
    for c in range(num_classes):
        tp = sum(1 for p, y in zip(predictions, labels) if p == c and y == c)
        predicted = sum(1 for p in predictions if p == c)
        support = sum(1 for y in labels if y == c)
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total += f1 * support
    return total / len(labels)


@pytest.mark.parametrize("seed", range(10))
def test_weighted_f1_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=40)
    predictions = np.where(rng.random(40) < 0.6, labels, rng.integers(0, 3, size=40))
    expected = direct_weighted_f1(predictions.tolist(), labels.tolist(), 4)
    assert metrics.weighted_f1(predictions, labels, 4) == pytest.approx(expected, abs=1e-12)


def test_per_class_f1_with_unpredicted_and_absent_classes():
    f1 = metrics.per_class_f1([0, 1, 1, 0], [0, 1, 0, 0], 3)
    np.testing.assert_allclose(f1, [0.8, 2 / 3, 0.0], atol=1e-12)
    assert metrics.weighted_f1([], [], 3) == 0.0
    assert not metrics.confusion_matrix([], [], 2).any()


def test_out_of_range_class():
    with pytest.raises(MetricError):
        metrics.confusion_matrix([0, 3], [0, 1], 3)


def test_multiclass_auc_is_macro_one_vs_rest():
    rng = np.random.default_rng(3)
    labels = np.repeat([0, 1, 2], 10)
    probabilities = rng.dirichlet(np.ones(3), size=30)
    expected = roc_auc_score(labels, probabilities, multi_class="ovr", average="macro")
    assert metrics.macro_ovr_auc(probabilities, labels) == pytest.approx(expected, abs=1e-12)


def test_evaluate_predictions_summary():
    result = metrics.evaluate_predictions(["a", "b", "c", "d"], [0, 0, 1, 1],
                                          np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.45, 0.55]]), 2)
    assert result.auc == 1.0
    assert result.weighted_f1 == 1.0
    assert list(result.per_slide.columns) == ["slide_id", "label", "predicted", "score"]
    assert result.summary()["confusion"] == [[2, 0], [0, 2]]

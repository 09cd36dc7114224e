import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.cluster import KMeans
from sklearn.datasets import make_blobs

import codebook as cbk
from errors import ConfigError, DimensionError, FormatError


def test_symmetric_pairs_give_midpoints():
    points = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    cb = cbk.build(points, 2, seed=0)
    centroids = sorted(map(tuple, cb.centroids))
    assert centroids == [(0.0, 0.5), (10.0, 0.5)]


def test_k_equal_to_distinct_points_has_zero_inertia():
    points = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    cb = cbk.build(points, 3, seed=4)
    assert cb.final_inertia == 0.0
    assert sorted(map(tuple, cb.centroids)) == sorted(map(tuple, points))


def test_inertia_close_to_many_restart_oracle():
    X, _ = make_blobs(n_samples=200, centers=8, n_features=4, random_state=0)
    oracle = KMeans(n_clusters=8, n_init=50, random_state=0).fit(X).inertia_
    cb = cbk.build(X, 8, seed=0, n_init=10)
    assert cb.final_inertia <= oracle * 1.05


def test_fewer_points_than_k_is_config_error():
    with pytest.raises(ConfigError):
        cbk.build(np.zeros((3, 2)), 4)


def test_inertia_history_never_increases(rng):
    cb = cbk.build(rng.normal(size=(120, 3)), 6, seed=2)
    history = np.asarray(cb.inertia_history)
    assert np.all(np.diff(history) <= 1e-9 * history[:-1] + 1e-9)
    assert cb.final_inertia == history[-1]
    assert 1 <= cb.kmeans_iters_run <= 100


def test_build_is_deterministic(rng):
    X = rng.normal(size=(80, 4))
    a, b = cbk.build(X, 5, seed=11), cbk.build(X, 5, seed=11)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    np.testing.assert_array_equal(cbk.assign_batch(a, X), cbk.assign_batch(b, X))


def test_duplicate_points_reseed_empty_clusters():
    X = np.array([[0.0, 0.0]] * 6 + [[5.0, 5.0]] * 2 + [[9.0, 0.0]])
    cb = cbk.build(X, 3, seed=0)
    assert np.all(np.isfinite(cb.centroids))
    assert cb.final_inertia == pytest.approx(0.0)


def test_codebook_is_read_only(rng):
    cb = cbk.build(rng.normal(size=(10, 2)), 2)
    with pytest.raises(ValueError):
        cb.centroids[0, 0] = 1.0
    with pytest.raises(AttributeError):
        cb.centroids = np.zeros((2, 2))


# --------------------------------------------------
# assignment
# --------------------------------------------------

def test_assign_exact_match():
    cb = cbk.Codebook(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]]))
    assert cbk.assign(cb, np.array([3.0, 3.0])) == 3


def test_assign_tie_goes_to_lowest_index():
    cb = cbk.Codebook(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert cbk.assign(cb, np.array([0.0, 5.0])) == 0


def test_assign_matches_exhaustive_scan(rng):
    cb = cbk.Codebook(rng.normal(size=(6, 5)))
    for f in rng.normal(size=(100, 5)):
        expected = min(range(6), key=lambda j: (float(np.sum((f - cb.centroids[j]) ** 2)), j))
        assert cbk.assign(cb, f) == expected


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_assigned_centroid_is_nearest(k, d, seed):
    rng = np.random.default_rng(seed)
    cb = cbk.Codebook(rng.normal(size=(k, d)))
    X = rng.normal(size=(15, d))
    labels = cbk.assign_batch(cb, X)
    d2 = ((X[:, None, :] - cb.centroids[None]) ** 2).sum(-1)
    assert np.all(d2[np.arange(15), labels] <= d2.min(axis=1))


def test_assign_dimension_mismatch():
    cb = cbk.Codebook(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        cbk.assign(cb, np.zeros(4))


def test_codebook_needs_two_centroids():
    with pytest.raises(ConfigError):
        cbk.Codebook(np.zeros((1, 3)))


# --------------------------------------------------
# persistence
# --------------------------------------------------

def test_round_trip_is_bit_exact(rng, tmp_path):
    cb = cbk.build(rng.normal(size=(50, 4)), 4, seed=1)
    cbk.save(cb, tmp_path / "cb.drsc")
    loaded = cbk.load(tmp_path / "cb.drsc")
    assert loaded.centroids.tobytes() == cb.centroids.tobytes()
    assert loaded.kmeans_iters_run == cb.kmeans_iters_run
    assert loaded.final_inertia == cb.final_inertia


def test_load_with_wrong_dimension(rng, tmp_path):
    cbk.save(cbk.Codebook(rng.normal(size=(3, 4))), tmp_path / "cb.drsc")
    with pytest.raises(DimensionError):
        cbk.load(tmp_path / "cb.drsc", expected_dim=5)


def test_assignments_replay_after_load(rng, tmp_path):
    X = rng.normal(size=(40, 3))
    cb = cbk.build(X, 5, seed=3)
    cbk.save(cb, tmp_path / "cb.drsc")
    queries = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(cbk.assign_batch(cbk.load(tmp_path / "cb.drsc"), queries),
                                  cbk.assign_batch(cb, queries))


def test_corrupted_codebook(rng, tmp_path):
    path = tmp_path / "cb.drsc"
    cbk.save(cbk.Codebook(rng.normal(size=(3, 4))), path)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        cbk.load(path)

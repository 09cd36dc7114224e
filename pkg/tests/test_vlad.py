import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import autodiff as ad
import codebook as cbk
import vlad
from debug_tools import naive_vlad
from errors import DimensionError, FormatError, InputError


@pytest.fixture
def two_centroids():
    return cbk.Codebook(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_hand_evaluated_descriptor(two_centroids):
    desc = vlad.encode_slide(two_centroids, stale_indices=[0, 1], stale_features=np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert desc.assignments.tolist() == [0, 1]
    np.testing.assert_array_equal(desc.flat.data, [0.0, 0.0, 0.0, 1.0])
    np.testing.assert_array_equal(desc.blocks.data, [[0.0, 0.0], [0.0, 1.0]])
    assert desc.norm_applied


def test_tiles_on_centroids_give_zero_descriptor(two_centroids):
    desc = vlad.encode_slide(two_centroids, stale_indices=[0, 1, 2],
                             stale_features=np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(desc.flat.data, np.zeros(4))
    assert not desc.norm_applied


def test_flat_is_concatenation_of_blocks(rng):
    cb = cbk.Codebook(rng.normal(size=(3, 4)))
    desc = vlad.encode_slide(cb, stale_indices=np.arange(7), stale_features=rng.normal(size=(7, 4)))
    assert desc.flat.data.tobytes() == desc.blocks.data.reshape(-1).tobytes()
    assert np.linalg.norm(desc.flat.data) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 10_000))
def test_permuted_tiles_are_bit_identical(n, seed):
    rng = np.random.default_rng(seed)
    cb = cbk.Codebook(rng.normal(size=(3, 4)))
    features = rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    a = vlad.encode_slide(cb, stale_indices=np.arange(n), stale_features=features).flat.data
    b = vlad.encode_slide(cb, stale_indices=perm, stale_features=features[perm]).flat.data
    assert a.tobytes() == b.tobytes()


def test_fresh_and_stale_mix_equals_all_stale(rng):
    cb = cbk.Codebook(rng.normal(size=(3, 4)))
    features = rng.normal(size=(6, 4))
    mixed = vlad.encode_slide(cb, [4, 1], ad.Tensor(features[[4, 1]]), [0, 2, 3, 5], features[[0, 2, 3, 5]])
    constant = vlad.encode_all(cb, features)
    assert mixed.flat.data.tobytes() == constant.tobytes()


def test_additivity_of_unnormalised_blocks(rng):
    cb = cbk.Codebook(rng.normal(size=(4, 3)))
    features = rng.normal(size=(12, 3))
    whole = vlad.residual_blocks(cb, features)
    parts = vlad.residual_blocks(cb, features[:5]) + vlad.residual_blocks(cb, features[5:])
    np.testing.assert_allclose(whole, parts, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(2, 4), st.integers(1, 8), st.integers(0, 10_000))
def test_matches_naive_oracle(n, k, d, seed):
    rng = np.random.default_rng(seed)
    cb = cbk.Codebook(rng.normal(size=(k, d)))
    features = rng.normal(size=(n, d))
    np.testing.assert_allclose(vlad.encode_all(cb, features), naive_vlad(cb.centroids, features), rtol=0, atol=1e-10)


def test_small_perturbation_keeps_assignments(rng):
    cb = cbk.Codebook(rng.normal(size=(4, 3)))
    features = rng.normal(size=(10, 3))
    before = vlad.encode_all(cb, features)
    a = vlad.encode_slide(cb, stale_indices=np.arange(10), stale_features=features).assignments
    b = vlad.encode_slide(cb, stale_indices=np.arange(10), stale_features=features + 1e-9).assignments
    np.testing.assert_array_equal(a, b)
    assert before.shape == (12,)


def test_duplicate_tile_index_is_input_error(two_centroids):
    with pytest.raises(InputError):
        vlad.encode_slide(two_centroids, [0], ad.Tensor(np.ones((1, 2))), [0], np.ones((1, 2)))


def test_wrong_feature_dimension(two_centroids):
    with pytest.raises(DimensionError):
        vlad.encode_slide(two_centroids, stale_indices=[0], stale_features=np.ones((1, 3)))


def test_empty_slide_is_input_error(two_centroids):
    with pytest.raises(InputError):
        vlad.encode_slide(two_centroids)


def test_intra_normalisation_gives_unit_blocks(rng):
    cb = cbk.Codebook(np.array([[5.0, 0.0], [-5.0, 0.0]]))
    features = np.array([[4.0, 1.0], [6.0, 2.0], [-4.0, 3.0]])
    desc = vlad.encode_slide(cb, stale_indices=np.arange(3), stale_features=features, intra_normalize=True)
    block_norms = np.linalg.norm(desc.blocks.data, axis=1)
    np.testing.assert_allclose(block_norms, block_norms[0], atol=1e-12)


# --------------------------------------------------
# gradient contract
# --------------------------------------------------

def test_gradient_contract_one_fresh_two_stale(rng):
    cb = cbk.Codebook(rng.normal(size=(2, 4)))
    report = vlad.grad_contract_check(cb, rng.normal(size=(1, 4)), rng.normal(size=(2, 4)))
    assert report.passed
    assert report.trainable_path
    assert report.constant_leaks == ()


def test_gradient_contract_with_block_independent_loss(rng):
    cb = cbk.Codebook(np.array([[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]]))
    fresh = np.array([[2.5, 0.3, -0.2]])
    stale = np.array([[-2.0, 0.5, 0.1], [-3.5, -0.4, 0.2]])
    # the loss reads only the block of cluster 1, which the fresh tile is not assigned to
    report = vlad.grad_contract_check(cb, fresh, stale, loss=lambda flat: ad.total(ad.slice_cols(
        ad.reshape(flat, (1, 6)), 3, 6)))
    assert report.passed


def test_gradient_contract_without_fresh_tiles(rng):
    cb = cbk.Codebook(rng.normal(size=(2, 3)))
    report = vlad.grad_contract_check(cb, np.zeros((0, 3)), rng.normal(size=(3, 3)))
    assert report.passed
    assert not report.trainable_path


def test_only_fresh_features_receive_gradients(rng):
    cb = cbk.Codebook(rng.normal(size=(3, 4)))
    fresh = ad.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    desc = vlad.encode_slide(cb, [0, 3], fresh, [1, 2], rng.normal(size=(2, 4)))
    grads = ad.backward(ad.total(desc.flat))
    assert fresh in grads
    leaves = [n for n in vlad._graph_leaves(desc.flat) if n.requires_grad]
    assert leaves == [fresh]


# --------------------------------------------------
# DRSV files
# --------------------------------------------------

def test_descriptor_file_round_trip(rng, tmp_path):
    descs = {"a": rng.normal(size=8).astype(np.float32), "b": rng.normal(size=8).astype(np.float32)}
    vlad.save_descriptors(tmp_path / "d.drsv", 2, 4, descs)
    k, d, loaded = vlad.load_descriptors(tmp_path / "d.drsv")
    assert (k, d) == (2, 4)
    assert list(loaded) == ["a", "b"]
    assert all(loaded[s].tobytes() == descs[s].tobytes() for s in descs)


def test_descriptor_file_rejects_foreign_magic(rng, tmp_path):
    path = tmp_path / "d.drsv"
    vlad.save_descriptors(path, 2, 4, {"a": np.zeros(8, dtype=np.float32)})
    data = bytearray(path.read_bytes())
    data[:4] = b"DRSB"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        vlad.load_descriptors(path)

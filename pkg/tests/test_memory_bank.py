import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from errors import DimensionError, FormatError, MissingSlideError
from memory_bank import MemoryBank, fill_bank


def unit(rng, n, d=4):
    x = rng.normal(size=(n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture
def bank(rng):
    bank = MemoryBank(4)
    fill_bank(bank, [("a", unit(rng, 3)), ("b", unit(rng, 5)), ("c", unit(rng, 2))])
    return bank


def test_insert_then_get_round_trips(rng):
    bank = MemoryBank(4)
    feature = unit(rng, 1)[0]
    bank.insert("s", 0, feature)
    assert bank.get("s", 0).tobytes() == feature.tobytes()


def test_second_insert_wins_and_version_counts(rng):
    bank = MemoryBank(4)
    first, second = unit(rng, 2)
    bank.insert("s", 1, first)
    bank.insert("s", 1, second)
    assert bank.version == 2
    assert bank.get("s", 1).tobytes() == second.tobytes()


def test_counts_across_slides(rng):
    bank = MemoryBank(4)
    layout = {"x": 4, "y": 3, "z": 3}
    for slide_id, n in layout.items():
        for i, feature in enumerate(unit(rng, n)):
            bank.insert(slide_id, i, feature)
    assert bank.slide_count() == 3
    assert {s: bank.tile_count(s) for s in layout} == layout
    assert bank.total_tiles() == 10


def test_insert_rejects_wrong_dimension():
    with pytest.raises(DimensionError):
        MemoryBank(4).insert("s", 0, np.ones(3))


def test_stored_features_are_normalised():
    bank = MemoryBank(2)
    bank.insert("s", 0, np.array([3.0, 4.0]))
    np.testing.assert_allclose(bank.get("s", 0), [0.6, 0.8], atol=1e-7)


def test_single_tile_slide(rng):
    bank = MemoryBank(4)
    bank.insert("s", 0, unit(rng, 1)[0])
    assert bank.get_slide("s").shape == (1, 4)


def test_out_of_order_inserts_come_back_sorted(rng):
    bank = MemoryBank(4)
    features = unit(rng, 3)
    for i in (2, 0, 1):
        bank.insert("s", i, features[i])
    indices, stored = bank.get_slide_indexed("s")
    assert indices.tolist() == [0, 1, 2]
    assert stored.tobytes() == features.tobytes()


def test_snapshot_does_not_alias(bank, rng):
    snapshot = bank.get_slide("a")
    kept = snapshot.copy()
    bank.insert("a", 0, unit(rng, 1)[0])
    assert snapshot.tobytes() == kept.tobytes()


def test_unknown_slide_is_named(bank):
    with pytest.raises(MissingSlideError) as info:
        bank.get_slide("nope")
    assert "nope" in str(info.value)


def test_replace_batch_touches_exactly_the_updated_entries(rng):
    bank = MemoryBank(4)
    for s in range(64):
        bank.insert_slide(f"s{s:02d}", unit(rng, 25))
    before = bank.dump()
    chosen = rng.choice(25, size=10, replace=False)
    bank.replace_batch([("s07", int(i), f) for i, f in zip(chosen, unit(rng, 10))])
    changed = bank.changed_entries(before)
    assert sorted(changed) == sorted(("s07", int(i)) for i in chosen)


def test_empty_batch_keeps_version(bank):
    version = bank.version
    bank.replace_batch([])
    assert bank.version == version


def test_replace_batch_is_all_or_nothing(bank, rng):
    before = bank.to_bytes()
    version = bank.version
    with pytest.raises(MissingSlideError):
        bank.replace_batch([("a", 0, unit(rng, 1)[0]), ("ghost", 0, unit(rng, 1)[0])])
    assert bank.to_bytes() == before
    assert bank.version == version


def test_readers_see_whole_batches(rng):
    bank = MemoryBank(4)
    bank.insert_slide("s", np.tile(unit(rng, 1), (8, 1)))
    batches = [np.tile(unit(rng, 1), (8, 1)) for _ in range(50)]
    torn = []

    def writer():
        for batch in batches:
            bank.replace_batch([("s", i, row) for i, row in enumerate(batch)])

    def reader():
        for _ in range(200):
            rows = bank.get_slide("s")
            if not np.all(rows == rows[0]):
                torn.append(rows)

    threads = [threading.Thread(target=writer), threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not torn


def test_declared_count_survives_training_updates(bank, rng):
    bank.replace_batch([("b", 4, unit(rng, 1)[0])])
    assert bank.tile_count("b") == bank.declared_count("b") == 5


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-10, 10)))
def test_every_stored_feature_is_unit_norm(features):
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms < 1e-3):
        return
    bank = MemoryBank(4)
    bank.insert_slide("s", features)
    np.testing.assert_allclose(np.linalg.norm(bank.get_slide("s").astype(np.float64), axis=1), 1.0, atol=1e-5)


# --------------------------------------------------
# persistence
# --------------------------------------------------

def test_empty_bank_round_trip(tmp_path):
    MemoryBank(7).save(tmp_path / "bank.drsb")
    loaded = MemoryBank.load(tmp_path / "bank.drsb")
    assert loaded.feature_dim == 7
    assert loaded.slide_count() == 0


def test_three_slide_round_trip_is_bit_exact(bank, tmp_path):
    bank.save(tmp_path / "bank.drsb")
    loaded = MemoryBank.load(tmp_path / "bank.drsb")
    assert loaded.to_bytes() == bank.to_bytes()
    assert loaded.slide_ids() == bank.slide_ids()
    assert not loaded.changed_entries(bank.dump())


def test_corrupted_header_is_a_format_error(bank, tmp_path):
    path = tmp_path / "bank.drsb"
    bank.save(path)
    data = bytearray(path.read_bytes())
    data[0:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as info:
        MemoryBank.load(path)
    assert info.value.offset == 0


def test_flipped_payload_byte_fails_checksum(bank, tmp_path):
    path = tmp_path / "bank.drsb"
    bank.save(path)
    data = bytearray(path.read_bytes())
    data[30] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        MemoryBank.load(path)


def test_truncated_file_is_a_format_error(bank):
    with pytest.raises(FormatError):
        MemoryBank.from_bytes(bank.to_bytes()[:20])

"""Dataset formats, deterministic batching and the preprocessing cache."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packtrain.data import (DataError, Dataset, PreprocessCache,
                            PreprocessSpec, batch_at, epoch_permutation,
                            load_dataset, preprocess, save_dataset,
                            synth_dataset)


def test_synth_dataset_shape_and_determinism():
    a = synth_dataset(100, 5, 3, seed=42)
    b = synth_dataset(100, 5, 3, seed=42)
    assert a.n == 100 and a.dim == 5 and a.class_count == 3
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.dataset_id == b.dataset_id
    assert a.labels.min() >= 0 and a.labels.max() < 3
    c = synth_dataset(100, 5, 3, seed=43)
    assert not np.array_equal(a.features, c.features)


def test_synth_single_class_labels_all_zero():
    ds = synth_dataset(50, 3, 1, seed=0)
    np.testing.assert_array_equal(ds.labels, 0)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset("bad", np.zeros((2, 3)), np.array([0, 5]), 3)  # label range
    with pytest.raises(DataError):
        Dataset("bad", np.zeros((2, 3)), np.array([0]), 3)  # count mismatch
    with pytest.raises(DataError):
        synth_dataset(0, 3, 2, seed=0)


def test_binary_round_trip(tmp_path):
    ds = synth_dataset(30, 4, 2, seed=7)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.class_count == 2
    # id is a digest of the bytes: identical files map to the same id
    path2 = tmp_path / "copy.bin"
    save_dataset(ds, path2)
    assert load_dataset(path2).dataset_id == back.dataset_id


def test_csv_loading(tmp_path):
    path = tmp_path / "ds.csv"
    path.write_text("1.0,2.0,0\n3.0,4.0,1\n\n5.0,6.0,1\n")
    ds = load_dataset(path)
    assert ds.n == 3 and ds.dim == 2 and ds.class_count == 2
    np.testing.assert_array_equal(ds.labels, [0, 1, 1])


@pytest.mark.parametrize("content,hint", [
    (b"", "empty"),
    (b"PTDS\x01\x00\x00", "truncated"),
    (b"PTDS" + b"\x09\x00\x00\x00" + b"\x00" * 20, "version"),
    (b"1.0,2.0,0\n3.0,1\n", "column"),
    (b"a,b,c\n", "literal"),
])
def test_malformed_files_are_rejected(tmp_path, content, hint):
    path = tmp_path / "bad"
    path.write_bytes(content)
    with pytest.raises(DataError):
        load_dataset(path)


def test_epoch_permutation_is_deterministic_permutation():
    p1 = epoch_permutation("ds", 100, 0)
    p2 = epoch_permutation("ds", 100, 0)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(np.sort(p1), np.arange(100))
    assert not np.array_equal(p1, epoch_permutation("ds", 100, 1))
    assert not np.array_equal(p1, epoch_permutation("other", 100, 0))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), epoch=st.integers(0, 20))
def test_epoch_permutation_property(n, epoch):
    perm = epoch_permutation("prop", n, epoch)
    assert sorted(perm) == list(range(n))


def test_batch_at_covers_epoch_exactly_once():
    ds = synth_dataset(25, 3, 2, seed=1)
    perm = epoch_permutation(ds.dataset_id, ds.n, 0)
    seen = []
    cursor = 0
    while cursor < ds.n:
        take = min(7, ds.n - cursor)
        x, y, idx = batch_at(ds, perm, cursor, take)
        assert x.shape == (take, 3)
        np.testing.assert_array_equal(y, ds.labels[idx])
        seen.extend(idx)
        cursor += take
    assert sorted(seen) == list(range(25))


def test_batch_at_out_of_range():
    ds = synth_dataset(10, 3, 2, seed=1)
    perm = epoch_permutation(ds.dataset_id, ds.n, 0)
    with pytest.raises(DataError):
        batch_at(ds, perm, 8, 5)


def test_preprocess_empty_spec_is_identity():
    batch = np.random.default_rng(0).normal(size=(4, 3))
    out = preprocess(PreprocessSpec(), batch, [0, 1, 2, 3], "ds")
    assert out is batch


def test_preprocess_normalize_statistics():
    ds = synth_dataset(200, 4, 3, seed=5)
    mean = ds.features.mean()
    std = ds.features.std()
    spec = PreprocessSpec(stages=(("normalize", mean, std),))
    out = preprocess(spec, ds.features, np.arange(ds.n), ds.dataset_id)
    assert abs(out.mean()) <= 1e-9
    assert abs(out.std() - 1.0) <= 1e-9


def test_preprocess_jitter_is_per_sample_deterministic():
    spec = PreprocessSpec(stages=(("jitter", 13),))
    batch = np.ones((2, 3))
    a = preprocess(spec, batch, [5, 6], "ds")
    b = preprocess(spec, batch, [5, 6], "ds")
    np.testing.assert_array_equal(a, b)
    # same sample index jitters identically regardless of batch position
    c = preprocess(spec, batch, [6, 5], "ds")
    np.testing.assert_array_equal(a[0], c[1])
    assert not np.array_equal(a[0], a[1])


def test_preprocess_cache_shares_work_across_consumers():
    spec = PreprocessSpec(stages=(("jitter", 1),))
    cache = PreprocessCache()
    batch = np.ones((3, 2))
    first = preprocess(spec, batch, [0, 1, 2], "ds", cache)
    assert (cache.hits, cache.misses) == (0, 3)
    second = preprocess(spec, batch, [0, 1, 2], "ds", cache)
    assert (cache.hits, cache.misses) == (3, 3)
    np.testing.assert_array_equal(first, second)
    # a different spec or dataset must not hit the same entries
    preprocess(PreprocessSpec(stages=(("jitter", 2),)), batch, [0, 1, 2],
               "ds", cache)
    assert cache.misses == 6


def test_preprocess_unknown_stage():
    with pytest.raises(DataError):
        preprocess(PreprocessSpec(stages=(("fft",),)), np.ones((1, 2)), [0], "ds")

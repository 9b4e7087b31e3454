from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delta_lab import container
from delta_lab import taskgen as tg
from delta_lab.errors import ConfigError, CorruptFileError, DataError, HashMismatchError


@pytest.fixture(scope="module")
def suite():
    return tg.make_suite(tg.SuiteSpec())


def test_default_shapes(suite):
    spec = suite.spec
    assert len(suite.tasks) == 4 and suite.centers.shape == (4, 3, 16)
    for t in suite.tasks:
        assert t.inputs.shape == (2000, 16)
        assert len(t.train_idx) + len(t.test_idx) == 2000
        assert np.bincount(t.labels).tolist() in ([667, 667, 666], [666, 667, 667])
    assert len(suite.reference) == spec.reference_factor * spec.samples_per_task
    assert (suite.reference.source >= 0).sum() == len(suite.reference) // 2


def test_regeneration_is_byte_identical(suite, tmp_path):
    again = tg.make_suite(tg.SuiteSpec())
    for a, b in zip(suite.tasks + [suite.reference], again.tasks + [again.reference]):
        assert tg.save_dataset(a, tmp_path / "a") == tg.save_dataset(b, tmp_path / "b")


def test_centers_are_separated(suite):
    assert tg.min_center_distance(suite.centers) >= suite.spec.center_separation


def test_test_samples_closest_to_own_task(suite):
    flat = suite.centers.reshape(-1, 16)
    owner = np.repeat(np.arange(4), 3)
    for t, task in enumerate(suite.tasks):
        X, _ = task.test()
        d = np.linalg.norm(X[:, None, :] - flat[None], axis=-1)
        assert np.all(owner[d.argmin(axis=1)] == t)


def test_reference_covers_every_center(suite):
    flat = suite.centers.reshape(-1, 16)
    d = np.linalg.norm(suite.reference.inputs[:, None, :] - flat[None], axis=-1)
    # distance measured in root-mean-square per coordinate
    rms = d / np.sqrt(suite.spec.input_dim)
    assert np.all(rms.min(axis=0) <= 2 * suite.spec.cluster_std)


def test_reference_background_scale(suite):
    bg = suite.reference.inputs[suite.reference.source < 0]
    assert bg.std() == pytest.approx(2 * 6.0 / 3, rel=0.05)


def test_hint_rate_controls_blob_labels():
    base = tg.make_suite(tg.SuiteSpec(samples_per_task=300, hint_rate=0.0)).reference
    full = tg.make_suite(tg.SuiteSpec(samples_per_task=300, hint_rate=1.0)).reference
    blob = full.source >= 0
    assert np.array_equal(full.labels[blob], full.source[blob] % 3)
    assert np.array_equal(full.labels[~blob], base.labels[~blob])
    assert np.array_equal(full.inputs, base.inputs)
    with pytest.raises(ConfigError):
        tg.SuiteSpec(hint_rate=1.5)


def test_variants(suite):
    spec = suite.spec
    broad = tg.make_reference_variant(spec, "broad")
    assert tg.save_dataset(broad, "/dev/null") == tg.save_dataset(suite.reference, "/dev/null")
    union = tg.make_reference_variant(spec, "union_only")
    assert np.all(union.source >= 0) and len(union) == (suite.reference.source >= 0).sum()
    proxy = tg.make_reference_variant(spec, "single_task_proxy")
    assert set(np.unique(proxy.source // 3)) == {3}
    assert set(np.unique(tg.reference_subset(suite.reference, spec, "single_task_proxy", 1).source // 3)) == {1}
    with pytest.raises(ConfigError):
        tg.make_reference_variant(spec, "imagenet")
    with pytest.raises(ConfigError):
        tg.make_reference_variant(spec, "single_task_proxy", 9)


def test_single_task_suite():
    s = tg.make_suite(tg.SuiteSpec(n_tasks=1, samples_per_task=300))
    assert len(s.tasks) == 1 and s.reference is not None


def test_placement_failure_advises_seed():
    with pytest.raises(ConfigError, match="seed"):
        tg.make_suite(tg.SuiteSpec(n_tasks=10, input_dim=1, center_separation=50.0))


def test_invalid_spec():
    with pytest.raises(ConfigError):
        tg.SuiteSpec(n_classes=1)
    with pytest.raises(ConfigError):
        tg.SuiteSpec(samples_per_task=5)


def test_save_load_roundtrip(suite, tmp_path):
    ds = suite.tasks[0]
    h = tg.save_dataset(ds, tmp_path / "t.dlab")
    back = tg.load_dataset(tmp_path / "t.dlab")
    assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.test_idx, ds.test_idx)
    assert back.content_hash == ds.content_hash
    assert tg.save_dataset(back, tmp_path / "u.dlab") == h
    header, arrays = container.read(tmp_path / "t.dlab")
    assert header["meta"]["section_sha256"]["inputs"] == container.sha256_hex(arrays["inputs"].tobytes())


def test_truncated_file_is_rejected(suite, tmp_path):
    tg.save_dataset(suite.tasks[0], tmp_path / "t.dlab")
    blob = (tmp_path / "t.dlab").read_bytes()
    (tmp_path / "t.dlab").write_bytes(blob[:-10])
    with pytest.raises(CorruptFileError, match="byte offset"):
        tg.load_dataset(tmp_path / "t.dlab")
    (tmp_path / "t.dlab").write_bytes(blob[:-1] + bytes([blob[-1] ^ 1]))
    with pytest.raises(HashMismatchError):
        tg.load_dataset(tmp_path / "t.dlab")


def test_bad_partition_rejected(suite):
    ds = suite.tasks[0]
    with pytest.raises(DataError):
        tg.TaskDataset("x", ds.inputs, ds.labels, ds.train_idx, ds.train_idx, 3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_any_seed_gives_valid_partitions_and_separation(seed, T):
    s = tg.make_suite(tg.SuiteSpec(n_tasks=T, samples_per_task=60, seed=seed))
    assert tg.min_center_distance(s.centers) >= s.spec.center_separation
    for t in s.tasks + [s.reference]:
        assert len(np.intersect1d(t.train_idx, t.test_idx)) == 0
        assert 0 <= t.labels.min() and t.labels.max() < 3

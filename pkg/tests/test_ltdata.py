import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecl.ltdata import (
    ClassPrior,
    DataError,
    LongTailSpec,
    build_synthetic_lt_dataset,
    compute_prior,
    group_classes,
    load_dataset,
    make_class_counts,
    save_counts,
    save_dataset,
    two_view_batch,
)


def test_counts_examples():
    assert make_class_counts(LongTailSpec(5, 100, 1)).tolist() == [100] * 5
    assert make_class_counts(LongTailSpec(3, 100, 100)).tolist() == [100, 10, 1]
    assert make_class_counts(LongTailSpec(2, 500, 100)).tolist() == [500, 5]


@pytest.mark.parametrize("args", [(1, 10, 2), (3, 0, 2), (3, 10, 0.5)])
def test_spec_rejects_invalid(args):
    with pytest.raises(DataError):
        LongTailSpec(*args)


@settings(max_examples=200, deadline=None)
@given(c=st.integers(2, 200), n_max=st.integers(1, 5000), gamma=st.floats(1, 1000))
def test_counts_profile_properties(c, n_max, gamma):
    counts = make_class_counts(LongTailSpec(c, n_max, gamma))
    assert counts.size == c
    assert np.all(np.diff(counts) <= 0)
    assert counts[0] == n_max
    assert counts[-1] == max(1, int(np.floor(n_max / gamma + 0.5)))
    if counts[-1] > 2 and n_max / gamma >= 1:
        ratio = counts[0] / counts[-1]
        lo, hi = gamma * (1 - 2 / counts[-1]), gamma * (1 + 2 / counts[-1])
        assert lo <= ratio <= hi


def test_prior_examples():
    np.testing.assert_array_equal(compute_prior([1, 1]), [0.5, 0.5])
    np.testing.assert_allclose(compute_prior([100, 10, 1]), np.array([100, 10, 1]) / 111, rtol=0)
    with pytest.raises(DataError):
        compute_prior([5])
    with pytest.raises(DataError):
        compute_prior([3, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 10**6), min_size=2, max_size=50))
def test_prior_sums_and_preserves_order(counts):
    p = compute_prior(counts)
    assert abs(p.sum() - 1) < 1e-12
    order = np.argsort(counts, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)


def test_class_prior_validation():
    with pytest.raises(DataError):
        ClassPrior([0.5, 0.5], [0.9, 0.2])
    with pytest.raises(DataError):
        ClassPrior([1.0, 0.0], [0.5, 0.5])
    with pytest.raises(DataError):
        ClassPrior([0.5, 0.5], [0.5, 0.5], -1)
    p = ClassPrior.from_counts([300, 100])
    np.testing.assert_allclose(p.p_target, [0.5, 0.5])


def test_group_examples():
    g = group_classes([500, 150, 100, 50, 20, 19, 5])
    assert (g.many, g.medium, g.few) == ({0, 1}, {2, 3, 4}, {5, 6})
    g = group_classes([50] * 6)
    assert g.many == set() and g.medium == set(range(6)) and g.few == set()
    g = group_classes([101, 100])
    assert g.many == {0} and g.medium == {1}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 500), min_size=1, max_size=40))
def test_groups_partition(counts):
    g = group_classes(counts)
    assert g.many | g.medium | g.few == set(range(len(counts)))
    assert not (g.many & g.medium or g.many & g.few or g.medium & g.few)


def test_synthetic_dataset_sizes():
    ds = build_synthetic_lt_dataset(LongTailSpec(4, 30, 1, seed=2), 5, 3.0, test_per_class=50)
    assert np.bincount(ds.y_train).tolist() == [30] * 4
    assert ds.x_test.shape == (200, 5)
    ds = build_synthetic_lt_dataset(LongTailSpec(3, 100, 100, seed=0), 4, 2.0)
    assert np.bincount(ds.y_train).tolist() == [100, 10, 1]
    assert ds.counts.tolist() == [100, 10, 1]


def test_synthetic_dataset_deterministic_and_immutable():
    spec = LongTailSpec(5, 40, 10, seed=9)
    a = build_synthetic_lt_dataset(spec, 6, 2.5)
    b = build_synthetic_lt_dataset(spec, 6, 2.5)
    for name in ("x_train", "y_train", "x_test", "y_test"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    with pytest.raises(ValueError):
        a.x_train[0, 0] = 1.0
    c = build_synthetic_lt_dataset(LongTailSpec(5, 40, 10, seed=10), 6, 2.5)
    assert c.x_train.tobytes() != a.x_train.tobytes()


def test_synthetic_means_respect_separation():
    # class means estimated from a large balanced test split
    ds = build_synthetic_lt_dataset(LongTailSpec(6, 10, 1, seed=4), 8, 5.0, test_per_class=4000)
    means = np.stack([ds.x_test[ds.y_test == i].mean(0) for i in range(6)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert d[np.triu_indices(6, 1)].min() > 5.0 - 0.2


@pytest.mark.parametrize("kw", [dict(feature_dim=1), dict(class_separation=0), dict(class_separation=-1)])
def test_synthetic_rejects(kw):
    args = dict(feature_dim=4, class_separation=1.0) | kw
    with pytest.raises(DataError):
        build_synthetic_lt_dataset(LongTailSpec(3, 10, 2), **args)


def test_two_view_batch():
    ds = build_synthetic_lt_dataset(LongTailSpec(3, 20, 2, seed=1), 4, 2.0)
    idx = np.arange(8)
    b = two_view_batch(ds, idx, 0.0, 5)
    np.testing.assert_array_equal(b.view_a, ds.x_train[idx])
    np.testing.assert_array_equal(b.view_b, ds.x_train[idx])
    b1 = two_view_batch(ds, idx, 0.3, 5)
    b2 = two_view_batch(ds, idx, 0.3, 5)
    np.testing.assert_array_equal(b1.view_a, b2.view_a)
    np.testing.assert_array_equal(b1.view_b, b2.view_b)
    assert not np.array_equal(b1.view_a, b1.view_b)
    assert b1.view_a.shape == b1.view_b.shape
    np.testing.assert_array_equal(b1.labels, ds.y_train[idx])
    with pytest.raises(IndexError):
        two_view_batch(ds, [ds.x_train.shape[0]], 0.1, 0)
    with pytest.raises(DataError):
        two_view_batch(ds, idx, -0.1, 0)


def test_two_view_noise_scale():
    # Monte-Carlo: E|N(0, s^2)| = s * sqrt(2/pi)
    ds = build_synthetic_lt_dataset(LongTailSpec(3, 20, 2, seed=1), 4, 2.0)
    idx = np.arange(8)
    devs = [np.abs(two_view_batch(ds, idx, 0.1, s).view_a - ds.x_train[idx]).mean() for s in range(2000)]
    assert np.mean(devs) == pytest.approx(0.1 * np.sqrt(2 / np.pi), rel=0.01)


def test_dataset_roundtrip(tmp_path):
    ds = build_synthetic_lt_dataset(LongTailSpec(3, 20, 4, seed=3), 3, 2.0, test_per_class=5)
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    assert path.read_text().splitlines()[0] == "ecl-dataset v1, C=3, d=3"
    assert path.read_text().splitlines()[1].startswith("train,0,")
    back = load_dataset(path)
    assert back.x_train.tobytes() == ds.x_train.tobytes()
    assert back.x_test.tobytes() == ds.x_test.tobytes()
    np.testing.assert_array_equal(back.counts, ds.counts)
    save_counts(ds.counts, 4.0, tmp_path / "c.json")
    assert json.loads((tmp_path / "c.json").read_text()) == {"counts": [20, 10, 5], "gamma": 4.0}


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("nonsense\n")
    with pytest.raises(DataError):
        load_dataset(bad)
    bad.write_text("ecl-dataset v1, C=2, d=2\ntrain,5,0.0,1.0\n")
    with pytest.raises(DataError):
        load_dataset(bad)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.cluster import KMeans

from holivid.clustering import cluster_report, inertia_of, is_monotone, kmeans, single_class_rows
from holivid.manifest import AnnotationRecord, Manifest
from holivid.metrics import clustering_accuracy


def blobs(seed=0, k=3, per=30, dim=5, spread=0.1):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=5.0, size=(k, dim))
    labels = np.repeat(np.arange(k), per)
    return centers[labels] + rng.normal(scale=spread, size=(k * per, dim)), labels


def test_k1_centroid_is_mean():
    x = np.random.default_rng(1).normal(size=(20, 3))
    res = kmeans(x, 1)
    assert (res.assignments == 0).all()
    np.testing.assert_allclose(res.centroids[0], x.mean(0), atol=1e-12)
    assert res.inertia == pytest.approx(((x - x.mean(0)) ** 2).sum())


def test_blobs_are_recovered():
    x, labels = blobs()
    res = kmeans(x, 3, seed=2)
    assert clustering_accuracy(res.assignments, labels, 3) == 1.0


def test_matches_reference_implementation_inertia():
    x, _ = blobs(seed=4, k=4, spread=1.0)
    ours = kmeans(x, 4, seed=0).inertia
    ref = KMeans(4, n_init=10, random_state=0).fit(x).inertia_
    assert ours == pytest.approx(ref, rel=1e-6)


def test_seeded_and_reproducible():
    x = np.random.default_rng(3).normal(size=(40, 4))
    a, b = kmeans(x, 3, seed=5), kmeans(x, 3, seed=5)
    assert np.array_equal(a.assignments, b.assignments)
    assert a.inertia == b.inertia


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_inertia_never_increases(k, seed):
    x = np.random.default_rng(seed).normal(size=(25, 3))
    res = kmeans(x, k, seed=seed, n_init=3)
    assert len(res.inertia_history) == 3
    assert all(is_monotone(h) for h in res.inertia_history)
    assert res.inertia == pytest.approx(inertia_of(x, res.assignments, res.centroids), rel=1e-12)
    assert res.inertia <= min(h[-1] for h in res.inertia_history) + 1e-9


def test_duplicate_points_do_not_leave_empty_clusters():
    x = np.zeros((6, 2))
    x[3:] = 1.0
    res = kmeans(x, 3, seed=0)
    assert res.inertia == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(res.centroids).all()


@pytest.mark.parametrize("k", [0, 11])
def test_bad_k(k):
    with pytest.raises(ValueError, match="k must lie"):
        kmeans(np.zeros((10, 2)), k)


def test_non_finite_features():
    x = np.zeros((4, 2))
    x[1, 1] = np.nan
    with pytest.raises(ValueError, match="finite"):
        kmeans(x, 2)


def test_is_monotone():
    assert is_monotone([3.0, 2.0, 2.0, 1.0])
    assert not is_monotone([3.0, 2.0, 2.5])


def test_cluster_report():
    x, labels = blobs(k=2)
    rep = cluster_report(x, labels, 2)
    assert rep["k"] == 2 and rep["accuracy"] == 1.0
    assert cluster_report(x, None, 2)["accuracy"] is None


def test_single_class_rows():
    m = Manifest((
        AnnotationRecord("a", "test", frozenset({0, 4})),
        AnnotationRecord("b", "test", frozenset({4, 5})),
        AnnotationRecord("c", "test", frozenset({1})),
        AnnotationRecord("d", "test", frozenset({5})),
    ))
    rows, classes = single_class_rows(m, [4, 5])
    assert rows.tolist() == [0, 3]
    assert classes.tolist() == [0, 1]

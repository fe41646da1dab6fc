"""Ordered kNN construction, caching, and sub-cluster decomposition."""

import numpy as np
import pytest

import fairclust as fc
from fairclust.neighborhood import (
    cluster_from_cache,
    cosine_similarity,
    decompose,
    knn_batch,
    knn_query,
    verify_order,
)


def brute_knn(vectors, i, n):
    sims = vectors @ vectors[i]
    order = np.argsort(-sims, kind="stable")
    order = order[order != i]
    return np.concatenate([[i], order[: n - 1]])


class TestCosine:
    def test_unit_rows_inner_product(self, rng):
        v = rng.standard_normal((5, 4))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        gram = v @ v.T
        for i in range(5):
            for j in range(5):
                assert cosine_similarity(v[i], v[j]) == pytest.approx(gram[i, j], abs=1e-12)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValueError):
            cosine_similarity(rng.standard_normal(4), rng.standard_normal(5))


class TestKnnBatch:
    def test_matches_brute_force(self, small_dataset):
        cache = knn_batch(small_dataset, 6)
        for r, i in enumerate(cache.indices):
            np.testing.assert_array_equal(cache.members[r], brute_knn(small_dataset.vectors, i, 6))

    def test_query_position_zero(self, small_dataset):
        cache = knn_batch(small_dataset, 4)
        np.testing.assert_array_equal(cache.members[:, 0], cache.indices)
        np.testing.assert_allclose(cache.similarities[:, 0], 1.0, atol=1e-12)

    def test_similarities_sorted(self, small_dataset):
        cache = knn_batch(small_dataset, 6)
        tail = cache.similarities[:, 1:]
        assert np.all(np.diff(tail, axis=1) <= 1e-12)

    def test_targets_from_labels(self, small_dataset):
        cache = knn_batch(small_dataset, 5)
        for r, i in enumerate(cache.indices):
            expect = (small_dataset.labels[cache.members[r]] == small_dataset.labels[i]).astype(float)
            np.testing.assert_array_equal(cache.targets[r], expect)

    def test_thread_parity(self, small_dataset):
        a = knn_batch(small_dataset, 6, threads=1)
        b = knn_batch(small_dataset, 6, threads=4)
        np.testing.assert_array_equal(a.members, b.members)
        np.testing.assert_allclose(a.similarities, b.similarities)

    def test_n_bounds(self, small_dataset):
        with pytest.raises(fc.ConfigError):
            knn_batch(small_dataset, 0)
        with pytest.raises(fc.ConfigError):
            knn_batch(small_dataset, small_dataset.count + 1)

    def test_subset_rows(self, small_dataset):
        full = knn_batch(small_dataset, 5)
        sub = knn_batch(small_dataset, 5, indices=[2, 7])
        np.testing.assert_array_equal(sub.members[0], full.members[2])
        np.testing.assert_array_equal(sub.members[1], full.members[7])


class TestKnnQuery:
    def test_single_matches_batch(self, small_dataset):
        batch = knn_batch(small_dataset, 5)
        single = knn_query(small_dataset, 3, 5)
        np.testing.assert_array_equal(single.members, batch.members[3])
        assert single.centroid == 3

    def test_cluster_from_cache(self, small_dataset):
        cache = knn_batch(small_dataset, 5)
        c = cluster_from_cache(cache, 2)
        assert c.centroid == cache.indices[2]
        np.testing.assert_array_equal(c.members, cache.members[2])


class TestDecompose:
    def test_shapes_and_content(self, small_dataset):
        cluster = knn_query(small_dataset, 0, 8)
        batch = decompose(cluster, 4, small_dataset)
        assert batch.k == 4 and batch.s == 2
        assert batch.sequences.shape == (4, 2, small_dataset.dim)
        flat = batch.sequences.reshape(8, small_dataset.dim)
        np.testing.assert_array_equal(flat, small_dataset.vectors[cluster.members])

    def test_k_one_identity(self, small_dataset):
        cluster = knn_query(small_dataset, 1, 6)
        batch = decompose(cluster, 1, small_dataset)
        assert batch.sequences.shape == (1, 6, small_dataset.dim)

    def test_k_must_divide(self, small_dataset):
        cluster = knn_query(small_dataset, 0, 6)
        with pytest.raises(fc.ConfigError):
            decompose(cluster, 4, small_dataset)


class TestVerifyOrder:
    def test_accepts_valid(self, small_dataset):
        cluster = knn_query(small_dataset, 0, 8)
        batch = decompose(cluster, 4, small_dataset)
        assert verify_order(batch)

    def test_rejects_shuffled(self, small_dataset):
        cluster = knn_query(small_dataset, 0, 8)
        sims = cluster.similarities.copy()
        sims[1], sims[-1] = sims[-1], sims[1]
        bad = fc.NeighborCluster(
            centroid=cluster.centroid,
            members=cluster.members,
            similarities=sims,
            targets=cluster.targets,
        )
        assert not verify_order(decompose(bad, 4, small_dataset))

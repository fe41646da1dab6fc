"""Numba and numpy kernel paths must agree exactly."""

import numpy as np
import pytest

from fairclust import _kernels


def brute_top_n(sims, keep):
    idx = np.empty((sims.shape[0], keep), dtype=np.int64)
    val = np.empty((sims.shape[0], keep), dtype=np.float64)
    for r in range(sims.shape[0]):
        order = np.argsort(-sims[r], kind="stable")
        order = order[order != r]
        idx[r] = order[:keep]
        val[r] = sims[r, idx[r]]
    return idx, val


class TestTopN:
    def test_matches_brute_force(self, rng):
        sims = rng.standard_normal((40, 40))
        sims = (sims + sims.T) / 2
        np.fill_diagonal(sims, 1.0)
        idx, val = _kernels.top_n_desc(sims, np.arange(40), 12)
        want_idx, want_val = brute_top_n(sims, 12)
        np.testing.assert_array_equal(idx, want_idx)
        np.testing.assert_array_equal(val, want_val)

    def test_paths_agree(self, rng):
        sims = rng.standard_normal((25, 25))
        np.fill_diagonal(sims, 1.0)
        exclude = np.arange(25, dtype=np.int64)
        a_idx, a_val = _kernels._top_n_numpy(sims, exclude, 10)
        b_idx, b_val = _kernels._top_n_numba(sims, exclude, 10)
        np.testing.assert_array_equal(a_idx, b_idx)
        np.testing.assert_array_equal(a_val, b_val)

    def test_tie_keeps_lower_index(self):
        # columns 3 and 7 tie; 3 must win on both paths
        sims = np.zeros((1, 9))
        sims[0, 3] = 0.5
        sims[0, 7] = 0.5
        sims[0, 1] = 0.9
        exclude = np.zeros(1, dtype=np.int64)
        for fn in (_kernels._top_n_numpy, _kernels._top_n_numba):
            idx, val = fn(sims, exclude, 2)
            np.testing.assert_array_equal(idx[0], [1, 3])
            np.testing.assert_array_equal(val[0], [0.9, 0.5])

    def test_all_equal_row(self):
        sims = np.ones((4, 4))
        idx, val = _kernels.top_n_desc(sims, np.arange(4), 3)
        for r in range(4):
            expect = [i for i in range(4) if i != r]
            np.testing.assert_array_equal(idx[r], expect)
        np.testing.assert_array_equal(val, np.ones((4, 3)))

    def test_keep_zero(self):
        sims = np.ones((3, 3))
        idx, val = _kernels.top_n_desc(sims, np.arange(3), 0)
        assert idx.shape == (3, 0)
        assert val.shape == (3, 0)

    def test_keep_too_large(self):
        with pytest.raises(ValueError):
            _kernels.top_n_desc(np.ones((3, 3)), np.arange(3), 3)

    def test_env_flag_forces_numpy(self, rng, monkeypatch):
        sims = rng.standard_normal((10, 10))
        exclude = np.arange(10)
        base_idx, base_val = _kernels.top_n_desc(sims, exclude, 4)
        monkeypatch.setenv("FAIRCLUST_DISABLE_NUMBA", "1")
        assert not _kernels.numba_enabled()
        idx, val = _kernels.top_n_desc(sims, exclude, 4)
        np.testing.assert_array_equal(idx, base_idx)
        np.testing.assert_array_equal(val, base_val)
        monkeypatch.delenv("FAIRCLUST_DISABLE_NUMBA")
        if _kernels.HAS_NUMBA:
            assert _kernels.numba_enabled()


class TestComponents:
    def test_known_graph(self):
        src = np.array([0, 1, 5, 6], dtype=np.int64)
        dst = np.array([1, 2, 6, 7], dtype=np.int64)
        labels, total = _kernels.connected_components(src, dst, 9)
        # {0,1,2} {3} {4} {5,6,7} {8}, labels by first appearance
        np.testing.assert_array_equal(labels, [0, 0, 0, 1, 2, 3, 3, 3, 4])
        assert total == 5

    def test_paths_agree(self, rng):
        n = 200
        src = rng.integers(0, n, 300).astype(np.int64)
        dst = rng.integers(0, n, 300).astype(np.int64)
        a_labels, a_total = _kernels._components_numpy(src, dst, n)
        b_labels, b_total = _kernels._components_numba(src.copy(), dst.copy(), n)
        np.testing.assert_array_equal(a_labels, b_labels)
        assert a_total == b_total

    def test_edge_order_invariant(self, rng):
        n = 60
        src = rng.integers(0, n, 100).astype(np.int64)
        dst = rng.integers(0, n, 100).astype(np.int64)
        base, base_total = _kernels.connected_components(src, dst, n)
        perm = rng.permutation(100)
        shuffled, shuffled_total = _kernels.connected_components(
            src[perm], dst[perm], n)
        np.testing.assert_array_equal(base, shuffled)
        assert base_total == shuffled_total

    def test_no_edges(self):
        empty = np.empty(0, dtype=np.int64)
        labels, total = _kernels.connected_components(empty, empty, 5)
        np.testing.assert_array_equal(labels, np.arange(5))
        assert total == 5

    def test_out_of_range_rejected(self):
        src = np.array([0], dtype=np.int64)
        dst = np.array([5], dtype=np.int64)
        with pytest.raises(ValueError):
            _kernels.connected_components(src, dst, 5)

"""Quantile codebooks: equal-count binning against a sort-based oracle,
tie handling, round trips, and serialization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from molseq import codebook as cb


def sort_based_counts(values, edges):
    """Oracle: bin occupancy by linear scan over the sorted sample."""
    counts = np.zeros(len(edges) + 1, dtype=int)
    for v in values:
        b = 0
        while b < len(edges) and v >= edges[b]:
            b += 1
        counts[b] += 1
    return counts


class TestFitQuantileEdges:
    def test_equal_counts_small(self):
        rng = np.random.default_rng(0)
        vals = rng.standard_normal(1000)
        k = 16
        edges = cb.fit_quantile_edges(vals, k)
        counts = np.bincount(cb.assign_bins(vals, edges), minlength=k)
        assert counts.sum() == 1000
        mean = 1000 / k
        assert np.all(np.abs(counts - mean) <= 1.0)

    def test_counts_match_sort_oracle(self):
        rng = np.random.default_rng(1)
        vals = rng.exponential(size=500)
        edges = cb.fit_quantile_edges(vals, 8)
        fast = np.bincount(cb.assign_bins(vals, edges), minlength=8)
        slow = sort_based_counts(vals, edges.edges)
        np.testing.assert_array_equal(fast, slow)

    @given(
        seed=st.integers(0, 1000),
        k=st.sampled_from([2, 4, 8, 32]),
        n=st.integers(100, 400),
    )
    @settings(max_examples=30, deadline=None)
    def test_equal_counts_property(self, seed, k, n):
        rng = np.random.default_rng(seed)
        vals = rng.standard_normal(n)
        edges = cb.fit_quantile_edges(vals, k)
        counts = np.bincount(cb.assign_bins(vals, edges), minlength=k)
        assert np.all(np.abs(counts - n / k) <= 1.0)

    def test_duplicate_edges_rejected(self):
        vals = np.concatenate([np.zeros(50), np.ones(50)])
        with pytest.raises(cb.DuplicateEdgeError):
            cb.fit_quantile_edges(vals, 4)

    def test_constant_input_rejected(self):
        with pytest.raises(cb.DuplicateEdgeError):
            cb.fit_quantile_edges(np.full(100, 3.0), 2)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            cb.fit_quantile_edges([1.0, np.nan, 2.0], 2)

    def test_k_validation(self):
        with pytest.raises(ValueError):
            cb.fit_quantile_edges([1.0, 2.0], 1)

    def test_representative_is_member_median(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(size=256)
        k = 4
        edges = cb.fit_quantile_edges(vals, k)
        assignments = cb.assign_bins(vals, edges)
        for b in range(k):
            members = vals[assignments == b]
            assert edges.representatives[b] == np.median(members)


class TestAssign:
    def test_ties_go_to_lower_bin(self):
        edges = cb.QuantileEdges(
            edges=np.array([1.0, 2.0]), representatives=np.array([0.5, 1.5, 2.5])
        )
        # Value exactly on an edge belongs to the bin below it.
        assert cb.encode_value(1.0, edges) == 0
        assert cb.encode_value(2.0, edges) == 1
        assert cb.encode_value(1.5, edges) == 1

    def test_out_of_range_clamps(self):
        edges = cb.QuantileEdges(
            edges=np.array([0.0, 1.0]), representatives=np.array([-1.0, 0.5, 2.0])
        )
        assert cb.encode_value(-100.0, edges) == 0
        assert cb.encode_value(100.0, edges) == 2

    def test_non_finite_rejected(self):
        edges = cb.QuantileEdges(
            edges=np.array([0.0]), representatives=np.array([-1.0, 1.0])
        )
        with pytest.raises(ValueError):
            cb.encode_value(np.inf, edges)

    def test_decode_range_checked(self):
        edges = cb.QuantileEdges(
            edges=np.array([0.0]), representatives=np.array([-1.0, 1.0])
        )
        with pytest.raises(ValueError):
            cb.decode_bin(2, edges)

    def test_encode_decode_error_bounded(self):
        # Decoding gives the bin median, so the error is at most the bin span.
        rng = np.random.default_rng(3)
        vals = rng.standard_normal(2000)
        edges = cb.fit_quantile_edges(vals, 64)
        for v in vals[:200]:
            b = cb.encode_value(v, edges)
            lo = edges.edges[b - 1] if b > 0 else vals.min()
            hi = edges.edges[b] if b < 63 else vals.max()
            assert abs(cb.decode_bin(b, edges) - v) <= hi - lo + 1e-12


class TestPositionGrid:
    def test_cell_id_round_trip(self, small_codebook):
        k = small_codebook.position_axis_edges[0].n_bins
        assert k == 10
        for cell in (0, 1, 123, 999):
            xyz = small_codebook.decode_position_cell(cell)
            assert small_codebook.encode_position(xyz) == cell

    def test_cell_id_layout(self, small_codebook):
        # Cell id is (bx * 10 + by) * 10 + bz.
        xyz = np.array(
            [
                small_codebook.position_axis_edges[0].representatives[3],
                small_codebook.position_axis_edges[1].representatives[0],
                small_codebook.position_axis_edges[2].representatives[7],
            ]
        )
        assert small_codebook.encode_position(xyz) == 3 * 100 + 0 * 10 + 7

    def test_cell_range_checked(self, small_codebook):
        with pytest.raises(ValueError):
            small_codebook.decode_position_cell(1000)


class TestFitCodebook:
    def test_channels_present(self, small_codebook):
        assert len(small_codebook.position_axis_edges) == 3
        assert len(small_codebook.position_1d_edges) == 3
        assert len(small_codebook.force_axis_edges) == 3
        assert small_codebook.energy_edges is not None
        assert small_codebook.force_axis_edges[0].n_bins == 128
        assert small_codebook.energy_edges.n_bins == 32

    def test_missing_labels_rejected(self, lj_dataset):
        import dataclasses

        from molseq import frames as fr

        unlabeled = [
            fr.MolecularFrame(
                atomic_numbers=list(f.atomic_numbers), positions=f.positions
            )
            for f in lj_dataset[:5]
        ]
        with pytest.raises(ValueError):
            cb.fit_codebook(unlabeled, pos_1d_bins=4, force_bins=4, energy_bins=2)
        cb.fit_codebook(
            unlabeled,
            pos_1d_bins=8,
            fit_forces=False,
            fit_energy=False,
        )

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cb.fit_codebook([])


class TestSerialization:
    def test_json_round_trip(self, small_codebook, tmp_path):
        path = tmp_path / "codebook.json"
        cb.save_codebook(small_codebook, path)
        loaded = cb.load_codebook(path)
        for a, b in zip(
            small_codebook.position_axis_edges, loaded.position_axis_edges
        ):
            np.testing.assert_array_equal(a.edges, b.edges)
            np.testing.assert_array_equal(a.representatives, b.representatives)
        assert cb.codebook_hash(small_codebook) == cb.codebook_hash(loaded)

    def test_hash_changes_with_content(self, small_codebook, lj_dataset):
        other = cb.fit_codebook(
            lj_dataset, pos_1d_bins=16, force_bins=64, energy_bins=16
        )
        assert cb.codebook_hash(small_codebook) != cb.codebook_hash(other)

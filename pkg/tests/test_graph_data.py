import math

import numpy as np
import pytest
import scipy.sparse as sp

from graph_moe.graph_data import (
    DatasetException,
    DatasetFormatError,
    DatasetShapeError,
    GraphDataset,
    SplitError,
    SplitSpec,
    canonical_adjacency,
    generate_mixed_sbm,
    generate_sbm,
    load_dataset,
    load_splits,
    make_splits,
    node_homophily,
    partition_subspaces,
    permute_dataset,
    save_dataset,
)
from graph_moe.rng import RngState


class TestDataset:

    def test_rejects_asymmetric_adjacency(self):
        adjacency = sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(DatasetShapeError):
            GraphDataset("bad", 2, 1, 1, adjacency, np.zeros((2, 1)), np.zeros(2, dtype=np.int64))

    def test_rejects_label_out_of_range(self, path_graph):
        with pytest.raises(DatasetShapeError):
            GraphDataset("bad", 3, 2, 2, path_graph.adjacency, path_graph.features, np.array([0, 1, 2]))

    def test_canonical_adjacency_drops_loops_and_duplicates(self):
        adjacency = canonical_adjacency(3, np.array([0, 1, 1, 2]), np.array([1, 0, 1, 0]))
        np.testing.assert_array_equal(
            adjacency.toarray(), [[0, 1, 1], [1, 0, 0], [1, 0, 0]]
        )

    def test_num_edges_and_degrees(self, path_graph):
        assert path_graph.num_edges == 2
        np.testing.assert_array_equal(path_graph.degrees, [1, 2, 1])


class TestNormalizeAdjacency:

    def test_path_graph_values(self, path_graph):
        a_hat = path_graph.normalized_adjacency.toarray()
        assert a_hat[0, 0] == pytest.approx(0.5)
        assert a_hat[0, 1] == pytest.approx(1 / math.sqrt(6))
        assert a_hat[1, 1] == pytest.approx(1 / 3)
        assert a_hat[2, 2] == pytest.approx(0.5)

    def test_symmetric(self, small_sbm):
        a_hat = small_sbm.normalized_adjacency
        assert abs(a_hat - a_hat.T).max() < 1e-15

    def test_isolated_node_keeps_self_loop(self):
        adjacency = canonical_adjacency(3, np.array([0]), np.array([1]))
        g = GraphDataset("iso", 3, 1, 1, adjacency, np.zeros((3, 1)), np.zeros(3, dtype=np.int64))
        assert g.normalized_adjacency[2, 2] == pytest.approx(1.0)


class TestHomophily:

    def test_path_graph(self, path_graph):
        np.testing.assert_allclose(node_homophily(path_graph), [0.0, 0.0, 0.0])

    def test_isolated_is_nan(self):
        adjacency = canonical_adjacency(3, np.array([0]), np.array([1]))
        g = GraphDataset("iso", 3, 1, 2, adjacency, np.zeros((3, 1)), np.array([0, 0, 1]))
        values = node_homophily(g)
        assert values[0] == 1.0 and values[1] == 1.0
        assert math.isnan(values[2])

    def test_pure_assortative_sbm_fills_top_bin(self):
        g = generate_sbm(80, 4, 0.3, 0.0, 4, 1.0, RngState(1))
        profile = partition_subspaces(g, 5, 3)
        populated = profile.subspace[profile.subspace >= 0]
        assert np.all(populated // 3 == 4)

    def test_partition_counts(self, small_sbm):
        profile = partition_subspaces(small_sbm, 5, 3)
        counts = sum(profile.members(i).size for i in range(profile.num_subspaces))
        assert counts == int(np.sum(small_sbm.degrees > 0))

    def test_bad_bin_counts(self, small_sbm):
        with pytest.raises(DatasetException):
            partition_subspaces(small_sbm, 0, 3)


class TestGenerators:

    def test_sbm_edge_count(self):
        g = generate_sbm(400, 4, 0.05, 0.005, 16, 1.0, RngState(0))
        expected = 0.5 * 400 ** 2 * (0.05 / 4 + 3 * 0.005 / 4)
        assert abs(g.num_edges - expected) <= 0.15 * expected

    def test_sbm_labels_balanced(self):
        g = generate_sbm(400, 4, 0.05, 0.005, 16, 1.0, RngState(0))
        np.testing.assert_array_equal(np.bincount(g.labels), [100, 100, 100, 100])

    def test_deterministic(self):
        a = generate_sbm(100, 4, 0.1, 0.01, 8, 1.0, RngState(3))
        b = generate_sbm(100, 4, 0.1, 0.01, 8, 1.0, RngState(3))
        assert (a.adjacency != b.adjacency).nnz == 0
        np.testing.assert_array_equal(a.features, b.features)

    def test_mixed_sbm_needs_three_classes(self):
        with pytest.raises(DatasetException):
            generate_mixed_sbm(100, 2, 0.1, 0.01, 8, 1.0, RngState(0))

    def test_mixed_sbm_has_low_homophily_classes(self):
        g = generate_mixed_sbm(200, 4, 0.15, 0.005, 8, 1.0, RngState(0))
        homophily = node_homophily(g)
        assortative = np.nanmean(homophily[g.labels < 2])
        disassortative = np.nanmean(homophily[g.labels >= 2])
        assert assortative > 0.7
        assert disassortative < 0.3


class TestSplits:

    def test_ratios(self):
        g = generate_sbm(400, 4, 0.05, 0.005, 16, 1.0, RngState(0))
        split = make_splits(g, seed=0)
        assert (split.train.size, split.val.size, split.test.size) == (192, 128, 80)

    def test_disjoint_and_complete(self, small_sbm, small_split):
        combined = np.concatenate([small_split.train, small_split.val, small_split.test])
        np.testing.assert_array_equal(np.sort(combined), np.arange(small_sbm.num_nodes))

    def test_every_class_in_train(self, small_sbm, small_split):
        assert set(small_sbm.labels[small_split.train]) == set(range(small_sbm.num_classes))

    def test_seeds_differ(self):
        g = generate_sbm(100, 4, 0.1, 0.01, 8, 1.0, RngState(0))
        assert not np.array_equal(make_splits(g, seed=0).train, make_splits(g, seed=1).train)

    def test_same_seed_repeats(self, small_sbm):
        np.testing.assert_array_equal(make_splits(small_sbm, seed=4).test, make_splits(small_sbm, seed=4).test)

    def test_tiny_class_rejected(self, path_graph):
        with pytest.raises(SplitError):
            make_splits(path_graph)

    def test_overlap_rejected(self):
        with pytest.raises(SplitError):
            SplitSpec([0, 1], [1, 2], [3], 0)


class TestDatasetFiles:

    def test_save_and_load(self, small_sbm, small_split, tmp_path):
        save_dataset(small_sbm, tmp_path, [small_split])
        loaded = load_dataset(tmp_path)
        assert (loaded.adjacency != small_sbm.adjacency).nnz == 0
        np.testing.assert_array_equal(loaded.features, small_sbm.features)
        np.testing.assert_array_equal(loaded.labels, small_sbm.labels)
        stored = load_splits(tmp_path, 0)
        np.testing.assert_array_equal(stored.val, small_split.val)
        assert load_splits(tmp_path, 99) is None

    def test_missing_file(self, small_sbm, tmp_path):
        save_dataset(small_sbm, tmp_path)
        (tmp_path / "labels.tsv").unlink()
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)

    def test_bad_magic(self, small_sbm, tmp_path):
        save_dataset(small_sbm, tmp_path)
        raw = (tmp_path / "features.bin").read_bytes()
        (tmp_path / "features.bin").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)

    def test_reserved_header_field(self, small_sbm, tmp_path):
        save_dataset(small_sbm, tmp_path)
        raw = (tmp_path / "features.bin").read_bytes()
        (tmp_path / "features.bin").write_bytes(raw[:12] + (7).to_bytes(4, "little") + raw[16:])
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)

    @pytest.mark.parametrize("filename, content", [
        ("edges.tsv", "0\t1\n1\tx\n"),
        ("edges.tsv", "0\t1.5\n"),
        ("labels.tsv", "0\nlabel\n"),
    ])
    def test_non_integer_entries(self, small_sbm, tmp_path, filename, content):
        save_dataset(small_sbm, tmp_path)
        (tmp_path / filename).write_text(content)
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)

    def test_malformed_meta_count(self, small_sbm, tmp_path):
        save_dataset(small_sbm, tmp_path)
        (tmp_path / "meta.json").write_text('{"name": "g", "num_nodes": "many", "num_features": 6, "num_classes": 3}')
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)


class TestPermutation:

    def test_relabels_nodes(self, small_sbm):
        perm = RngState(2).permutation(small_sbm.num_nodes)
        permuted = permute_dataset(small_sbm, perm)
        np.testing.assert_array_equal(permuted.labels, small_sbm.labels[perm])
        assert permuted.num_edges == small_sbm.num_edges
        i, j = small_sbm.adjacency.nonzero()
        inverse = np.argsort(perm)
        assert np.all(permuted.adjacency[inverse[i], inverse[j]] == 1)

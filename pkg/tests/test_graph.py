import numpy as np
import pytest

from emcnet import autodiff as ad
from emcnet.autodiff import Tensor
from emcnet.errors import DimensionError
from emcnet.gradcheck import check_gradients
from emcnet.graph import (
    EmbeddingParams,
    PatchGraph,
    augment_master_node,
    build_grid_adjacency,
    embed_patches,
    graph_to_json_dict,
)
from emcnet.imaging import PatchSequence


def edge_count(adj):
    return int(adj.sum()) // 2


class TestGridAdjacency:
    def test_3x3_has_20_edges(self):
        adj = build_grid_adjacency(3, 3)
        assert edge_count(adj) == 20

    def test_3x3_matches_drawn_edge_list(self):
        # 12 orthogonal + 8 diagonal edges of the 3x3 grid, 0-indexed
        drawn = {
            (0, 1), (1, 2), (0, 3), (3, 6), (1, 4), (4, 7), (2, 5), (5, 8),
            (3, 4), (4, 5), (6, 7), (7, 8),
            (0, 4), (4, 8), (6, 4), (4, 2), (1, 3), (3, 7), (1, 5), (7, 5),
        }
        adj = build_grid_adjacency(3, 3)
        got = {(min(u, v), max(u, v)) for u, v in zip(*np.nonzero(adj))}
        assert got == {(min(u, v), max(u, v)) for u, v in drawn}

    def test_1x1_has_no_edges(self):
        assert edge_count(build_grid_adjacency(1, 1)) == 0

    def test_2x2_is_complete(self):
        adj = build_grid_adjacency(2, 2)
        assert edge_count(adj) == 6
        np.testing.assert_array_equal(adj, np.ones((4, 4)) - np.eye(4))

    def test_symmetric_no_self_loops(self):
        for rows, cols in [(1, 5), (4, 3), (8, 8)]:
            adj = build_grid_adjacency(rows, cols)
            np.testing.assert_array_equal(adj, adj.T)
            np.testing.assert_array_equal(np.diag(adj), 0.0)

    def test_fixed_topology_across_builds(self):
        np.testing.assert_array_equal(build_grid_adjacency(4, 5), build_grid_adjacency(4, 5))


def make_params(patch_dim, n, d, rng=None):
    rng = rng or np.random.default_rng(0)
    return EmbeddingParams(
        patch_projection=Tensor(rng.standard_normal((patch_dim, d)), requires_grad=True),
        position_table=Tensor(rng.standard_normal((n, d)), requires_grad=True),
    )


class TestEmbedPatches:
    def test_all_zero(self):
        seq = PatchSequence(4, 1, np.zeros((4, 3)))
        params = make_params(3, 4, 2)
        params.patch_projection.data[:] = 0.0
        params.position_table.data[:] = 0.0
        np.testing.assert_array_equal(embed_patches(seq, params).data, np.zeros((4, 2)))

    def test_zero_patches_isolate_position_table(self):
        seq = PatchSequence(4, 1, np.zeros((4, 3)))
        params = make_params(3, 4, 2)
        out = embed_patches(seq, params)
        np.testing.assert_array_equal(out.data, params.position_table.data)

    def test_dimension_mismatch_names_shapes(self):
        seq = PatchSequence(4, 1, np.zeros((4, 5)))
        with pytest.raises(DimensionError, match=r"\(3, 2\)"):
            embed_patches(seq, make_params(3, 4, 2))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        seq = PatchSequence(4, 1, rng.uniform(0, 1, (4, 3)))
        params = make_params(3, 4, 2, rng)

        def f():
            out = embed_patches(seq, params)
            return ad.reduce_sum(ad.mul(out, out))

        errs = check_gradients(f, {"E": params.patch_projection, "P": params.position_table})
        assert max(errs.values()) <= 1e-6

    def test_positional_sensitivity(self):
        # same patch multiset, different arrangement -> different features
        rng = np.random.default_rng(2)
        params = make_params(3, 2, 4, rng)
        rows = rng.uniform(0, 1, (2, 3))
        seq_a = PatchSequence(2, 1, rows)
        seq_b = PatchSequence(2, 1, rows[::-1])
        assert not np.allclose(embed_patches(seq_a, params).data, embed_patches(seq_b, params).data)


class TestMasterNode:
    def graph(self, rows, cols, d=3):
        n = rows * cols
        return PatchGraph(n, build_grid_adjacency(rows, cols), Tensor(np.ones((n, d))))

    def test_2x2_plus_master_is_k5(self):
        aug = augment_master_node(self.graph(2, 2))
        assert aug.n_nodes == 5
        assert edge_count(aug.adjacency) == 10
        assert aug.master_index == 4

    def test_3x3_plus_master_has_29_edges_not_complete(self):
        aug = augment_master_node(self.graph(3, 3))
        assert edge_count(aug.adjacency) == 29
        assert aug.adjacency[0, 8] == 0.0  # opposite corners stay non-adjacent

    def test_master_feature_row_is_zero(self):
        aug = augment_master_node(self.graph(2, 2))
        np.testing.assert_array_equal(aug.features.data[-1], np.zeros(3))
        np.testing.assert_array_equal(aug.features.data[:-1], np.ones((4, 3)))

    def test_double_augmentation_rejected(self):
        aug = augment_master_node(self.graph(2, 2))
        with pytest.raises(DimensionError):
            augment_master_node(aug)

    def test_adjacency_stays_symmetric_no_self_loops(self):
        aug = augment_master_node(self.graph(3, 4))
        np.testing.assert_array_equal(aug.adjacency, aug.adjacency.T)
        np.testing.assert_array_equal(np.diag(aug.adjacency), 0.0)


def test_graph_json_dump():
    g = PatchGraph(3, build_grid_adjacency(1, 3), Tensor(np.zeros((3, 2))))
    d = graph_to_json_dict(g)
    assert d == {"n": 3, "edges": [[0, 1], [1, 2]], "master": None}

import numpy as np
import pytest

from emcnet import autodiff as ad
from emcnet.autodiff import Tensor
from emcnet.errors import DimensionError
from emcnet.gradcheck import check_gradients
from emcnet.graph import build_grid_adjacency
from emcnet.treedecomp import (
    CliqueTree,
    build_clique_tree,
    clique_features,
    decompose,
    triangulate_min_degree,
    verify_rip,
)

# The six size-4 supernodes of the decomposed 3x3 diagonal grid (0-indexed
# here; the drawn figure labels nodes 1..9)
FIG_SUPERNODES = [
    {0, 1, 3, 4},
    {1, 2, 4, 5},
    {1, 3, 4, 5},
    {3, 4, 6, 7},
    {3, 4, 5, 7},
    {4, 5, 7, 8},
]


def adjacency_from_edges(n, edges):
    adj = np.zeros((n, n))
    for u, v in edges:
        adj[u, v] = adj[v, u] = 1.0
    return adj


class TestTriangulation:
    def test_k4_already_chordal(self):
        elim = triangulate_min_degree(build_grid_adjacency(2, 2))
        assert elim.fill_edges == []
        assert max(len(c) for c in elim.cliques) == 4

    def test_3x3_grid_single_fill_edge(self):
        elim = triangulate_min_degree(build_grid_adjacency(3, 3))
        assert elim.fill_edges == [(3, 5)]  # joins the two mid-edge survivors

    def test_3x3_grid_candidate_cliques_include_all_cells(self):
        elim = triangulate_min_degree(build_grid_adjacency(3, 3))
        cells = [{0, 1, 3, 4}, {1, 2, 4, 5}, {3, 4, 6, 7}, {4, 5, 7, 8}]
        for cell in cells:
            assert frozenset(cell) in elim.cliques

    def test_path_graph(self):
        elim = triangulate_min_degree(adjacency_from_edges(3, [(0, 1), (1, 2)]))
        assert elim.fill_edges == []
        assert frozenset({0, 1}) in elim.cliques
        assert frozenset({1, 2}) in elim.cliques

    def test_corners_eliminated_first_on_3x3(self):
        elim = triangulate_min_degree(build_grid_adjacency(3, 3))
        assert elim.order[0] == 0  # degree-3 corner with the lowest index

    def test_rejects_asymmetric(self):
        adj = np.zeros((2, 2))
        adj[0, 1] = 1.0
        with pytest.raises(DimensionError):
            triangulate_min_degree(adj)

    def test_elimination_order_is_perfect_on_triangulated_graph(self):
        # chordality oracle: re-eliminating in the recorded order on the
        # filled graph must require no further fill
        for rows, cols in [(3, 3), (4, 4), (2, 5)]:
            adj = build_grid_adjacency(rows, cols)
            elim = triangulate_min_degree(adj)
            filled = adj.copy()
            for u, v in elim.fill_edges:
                filled[u, v] = filled[v, u] = 1.0
            nbrs = [set(np.nonzero(filled[v])[0].tolist()) for v in range(filled.shape[0])]
            for v in elim.order:
                rest = sorted(nbrs[v])
                for i, a in enumerate(rest):
                    for b in rest[i + 1 :]:
                        assert b in nbrs[a], f"fill missing between {a} and {b}"
                for a in rest:
                    nbrs[a].discard(v)


class TestCliqueTree:
    def test_3x3_grid_matches_drawn_tree(self):
        tree, elim = decompose(build_grid_adjacency(3, 3))
        assert [set(s) for s in tree.supernodes] == FIG_SUPERNODES
        assert len(tree.edges) == 5
        ok, report = verify_rip(tree, build_grid_adjacency(3, 3))
        assert ok, report

    def test_3x3_root_is_lowest_index_leaf(self):
        tree, _ = decompose(build_grid_adjacency(3, 3))
        assert tree.root == 0
        assert len(tree.neighbours(0)) == 1

    def test_seeded_root_is_a_leaf(self):
        adj = build_grid_adjacency(3, 3)
        for seed in range(5):
            tree, _ = decompose(adj, root_seed=seed)
            assert len(tree.neighbours(tree.root)) == 1

    def test_single_edge_graph(self):
        tree, _ = decompose(adjacency_from_edges(2, [(0, 1)]))
        assert tree.supernodes == [[0, 1]]
        assert tree.edges == []
        assert tree.root == 0

    def test_star_graph_rip_holds(self):
        adj = adjacency_from_edges(4, [(0, 1), (0, 2), (0, 3)])
        tree, _ = decompose(adj)
        assert sorted(map(set, tree.supernodes), key=sorted) == [{0, 1}, {0, 2}, {0, 3}]
        ok, _ = verify_rip(tree, adj)
        assert ok

    def test_all_supernodes_of_3x3_have_size_four(self):
        tree, _ = decompose(build_grid_adjacency(3, 3))
        assert all(len(s) == 4 for s in tree.supernodes)

    def test_deterministic(self):
        a1, _ = decompose(build_grid_adjacency(4, 4))
        a2, _ = decompose(build_grid_adjacency(4, 4))
        assert a1.supernodes == a2.supernodes
        assert a1.edges == a2.edges
        assert a1.root == a2.root

    def test_rip_verified_on_larger_grids(self):
        for rows, cols in [(4, 4), (5, 3), (8, 8), (1, 6)]:
            adj = build_grid_adjacency(rows, cols)
            tree, _ = decompose(adj)
            ok, report = verify_rip(tree, adj)
            assert ok, f"{rows}x{cols}: {report}"


class TestVerifyRip:
    def test_cycle_is_not_a_tree(self):
        tree, _ = decompose(build_grid_adjacency(3, 3))
        bad = CliqueTree(tree.supernodes, tree.edges + [(0, 5)], tree.root)
        ok, report = verify_rip(bad, build_grid_adjacency(3, 3))
        assert not ok and "not a tree" in report

    def test_uncovered_edge_detected(self):
        tree, _ = decompose(build_grid_adjacency(3, 3))
        # drop the first supernode but keep tree-ness among the rest
        bad = CliqueTree(tree.supernodes[1:], [(0, 1), (1, 2), (2, 3), (3, 4)], 0)
        ok, report = verify_rip(bad, build_grid_adjacency(3, 3))
        assert not ok and "uncovered" in report

    def test_rip_violation_detected(self):
        # two supernodes sharing node 9 bridged by one that lacks it
        tree = CliqueTree([[0, 9], [1, 2], [9, 3]], [(0, 1), (1, 2)], 0)
        adj = adjacency_from_edges(10, [(0, 9), (1, 2), (9, 3)])
        ok, report = verify_rip(tree, adj)
        assert not ok and "running intersection" in report


class TestCliqueFeatures:
    def tree(self):
        t, _ = decompose(build_grid_adjacency(3, 3))
        return t

    def test_zero_features_give_zero_supernode_features(self):
        tree = self.tree()
        d, kmax = 3, tree.max_supernode_size()
        out = clique_features(tree, Tensor(np.zeros((9, d))), Tensor(np.ones((kmax * d, d))))
        np.testing.assert_array_equal(out.data, np.zeros((6, d)))

    def test_full_supernode_is_plain_concat_times_projection(self):
        rng = np.random.default_rng(0)
        tree, _ = decompose(adjacency_from_edges(2, [(0, 1)]))
        feats = rng.standard_normal((2, 3))
        proj = rng.standard_normal((6, 3))
        out = clique_features(tree, Tensor(feats), Tensor(proj))
        np.testing.assert_allclose(out.data[0], feats.reshape(-1) @ proj, atol=1e-12)

    def test_padding_for_small_supernodes(self):
        rng = np.random.default_rng(1)
        # star: supernodes of size 2, k_max = 2
        tree, _ = decompose(adjacency_from_edges(4, [(0, 1), (0, 2), (0, 3)]))
        feats = rng.standard_normal((4, 2))
        proj = rng.standard_normal((4, 2))
        out = clique_features(tree, Tensor(feats), Tensor(proj))
        expected0 = np.concatenate([feats[0], feats[1]]) @ proj
        np.testing.assert_allclose(out.data[0], expected0, atol=1e-12)

    def test_projection_shape_checked(self):
        tree = self.tree()
        with pytest.raises(DimensionError):
            clique_features(tree, Tensor(np.zeros((9, 3))), Tensor(np.ones((5, 3))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        tree = self.tree()
        d = 2
        feats = Tensor(rng.standard_normal((9, d)), requires_grad=True)
        proj = Tensor(rng.standard_normal((tree.max_supernode_size() * d, d)), requires_grad=True)

        def f():
            out = clique_features(tree, feats, proj)
            return ad.reduce_sum(ad.mul(out, out))

        errs = check_gradients(f, {"X": feats, "W": proj})
        assert max(errs.values()) <= 1e-6

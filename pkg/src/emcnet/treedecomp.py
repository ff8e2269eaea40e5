"""Clique-tree decomposition of the patch grid graph.

The graph is triangulated by minimum-degree elimination (ties broken by
lowest node index), the cliques recorded during elimination are reduced to
the maximal ones, and those are joined by a maximum-weight spanning tree on
separator sizes, which guarantees the running-intersection property for a
chordal graph. The tree is rooted at a leaf supernode: the lowest-indexed
one by default, or a seeded random choice.

Decomposition is deterministic for a fixed graph, so for a fixed patch grid
it is computed once and shared across all images; only the supernode
features change per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, EMCNetError
from .rng import substream


@dataclass
class EliminationResult:
    order: list[int]
    fill_edges: list[tuple[int, int]]
    cliques: list[frozenset[int]]  # {v} + remaining neighbours, per elimination


@dataclass
class CliqueTree:
    supernodes: list[list[int]]  # sorted node indices per supernode
    edges: list[tuple[int, int]]
    root: int
    features: Tensor | None = field(default=None, repr=False)

    @property
    def n_supernodes(self) -> int:
        return len(self.supernodes)

    def neighbours(self, i: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return out

    def max_supernode_size(self) -> int:
        return max(len(s) for s in self.supernodes)

    def to_json_dict(self, fill_edges: list[tuple[int, int]] | None = None) -> dict:
        d = {
            "supernodes": [list(map(int, s)) for s in self.supernodes],
            "edges": [[int(a), int(b)] for a, b in self.edges],
            "root": int(self.root),
        }
        if fill_edges is not None:
            d["fill_edges"] = [[int(u), int(v)] for u, v in fill_edges]
        return d


def triangulate_min_degree(adjacency: np.ndarray) -> EliminationResult:
    """Eliminate minimum-degree nodes, adding fill edges between survivors."""
    adjacency = np.asarray(adjacency)
    n = adjacency.shape[0]
    if adjacency.shape != (n, n) or not np.array_equal(adjacency, adjacency.T):
        raise DimensionError("adjacency must be square and symmetric")
    if np.any(np.diag(adjacency) != 0):
        raise DimensionError("adjacency must have a zero diagonal")
    nbrs: list[set[int]] = [set(np.nonzero(adjacency[v])[0].tolist()) for v in range(n)]
    alive = set(range(n))
    order: list[int] = []
    fill: list[tuple[int, int]] = []
    cliques: list[frozenset[int]] = []
    while alive:
        v = min(alive, key=lambda u: (len(nbrs[u]), u))
        rest = sorted(nbrs[v])
        cliques.append(frozenset([v, *rest]))
        for i, a in enumerate(rest):
            for b in rest[i + 1 :]:
                if b not in nbrs[a]:
                    nbrs[a].add(b)
                    nbrs[b].add(a)
                    fill.append((a, b))
        for a in rest:
            nbrs[a].discard(v)
        alive.remove(v)
        order.append(v)
    return EliminationResult(order=order, fill_edges=fill, cliques=cliques)


def build_clique_tree(elim: EliminationResult, root_seed: int | None = None) -> CliqueTree:
    """Join the maximal elimination cliques into a running-intersection tree."""
    # elimination cliques are pairwise distinct (each contains its own
    # eliminated node), so dropping proper subsets leaves the maximal ones
    # in discovery order
    supers = [c for c in elim.cliques if not any(c < other for other in elim.cliques)]

    m = len(supers)
    candidates = sorted(
        ((i, j) for i in range(m) for j in range(i + 1, m)),
        key=lambda ij: (-len(supers[ij[0]] & supers[ij[1]]), ij),
    )
    parent = list(range(m))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges: list[tuple[int, int]] = []
    for i, j in candidates:
        if len(edges) == m - 1:
            break
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((i, j))

    tree = CliqueTree(supernodes=[sorted(s) for s in supers], edges=edges, root=0)
    degree = [0] * m
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1
    leaves = [i for i in range(m) if degree[i] <= 1]
    if root_seed is None:
        tree.root = min(leaves)
    else:
        tree.root = int(substream(root_seed, "treeroot").choice(leaves))
    return tree


def decompose(adjacency: np.ndarray, root_seed: int | None = None) -> tuple[CliqueTree, EliminationResult]:
    elim = triangulate_min_degree(adjacency)
    tree = build_clique_tree(elim, root_seed=root_seed)
    ok, report = verify_rip(tree, adjacency)
    if not ok:
        raise EMCNetError(f"decomposition violates its own invariants: {report}")
    return tree, elim


def verify_rip(tree: CliqueTree, adjacency: np.ndarray) -> tuple[bool, str]:
    """Check tree-ness, edge coverage, and the running-intersection property."""
    m = tree.n_supernodes
    if len(tree.edges) != m - 1:
        return False, f"not a tree: {len(tree.edges)} edges for {m} supernodes"
    # connectivity over supernodes
    if m > 0:
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for i in frontier:
                for j in tree.neighbours(i):
                    if j not in seen:
                        seen.add(j)
                        nxt.append(j)
            frontier = nxt
        if len(seen) != m:
            return False, "not a tree: supernode graph is disconnected"

    sets = [set(s) for s in tree.supernodes]
    for u, v in zip(*np.nonzero(np.triu(np.asarray(adjacency)))):
        if not any(u in s and v in s for s in sets):
            return False, f"edge ({u}, {v}) uncovered by every supernode"

    all_nodes = set().union(*sets) if sets else set()
    for node in sorted(all_nodes):
        holding = [i for i, s in enumerate(sets) if node in s]
        reached = {holding[0]}
        frontier = [holding[0]]
        holding_set = set(holding)
        while frontier:
            nxt = []
            for i in frontier:
                for j in tree.neighbours(i):
                    if j in holding_set and j not in reached:
                        reached.add(j)
                        nxt.append(j)
            frontier = nxt
        if reached != holding_set:
            return False, f"node {node} violates running intersection"
    return True, "ok"


def clique_features(tree: CliqueTree, node_features: Tensor, projection: Tensor) -> Tensor:
    """Shared linear map of each supernode's concatenated member features.

    Member rows are concatenated in ascending node order and zero-padded to
    ``k_max * d`` before the projection, where ``k_max`` is the largest
    supernode in the tree.
    """
    k_max = tree.max_supernode_size()
    d = node_features.shape[1]
    if projection.shape[0] != k_max * d:
        raise DimensionError(
            f"clique projection {projection.shape} does not match k_max*d = {k_max * d}"
        )
    rows = []
    for members in tree.supernodes:
        flat = ad.reshape(ad.gather_rows(node_features, members), (1, len(members) * d))
        pad = k_max * d - flat.shape[1]
        if pad:
            flat = ad.concat([flat, ad.constant(np.zeros((1, pad)))], axis=1)
        rows.append(flat)
    return ad.matmul(ad.concat(rows, axis=0), projection)

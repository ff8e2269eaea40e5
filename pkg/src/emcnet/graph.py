"""Patch-attributed grid graphs with 8-neighborhood connectivity.

Patches become graph nodes in row-major order; each node connects to the
orthogonal and diagonal neighbours that exist on the grid, so the topology
is identical for every image of a given size. Node features are the linear
patch projection plus a learned per-position embedding. The graph encoder
works on a copy of the graph augmented with a virtual master node that is
linked to every real node (which does not make the graph complete).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .imaging import PatchSequence


@dataclass
class PatchGraph:
    n_nodes: int
    adjacency: np.ndarray  # (n, n) binary, symmetric, zero diagonal
    features: Tensor  # (n, d)
    master_index: int | None = None


@dataclass
class EmbeddingParams:
    patch_projection: Tensor  # (P*P*C, d)
    position_table: Tensor  # (N, d)


def build_grid_adjacency(rows: int, cols: int) -> np.ndarray:
    """Adjacency of the rows x cols grid with diagonal edges."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"grid must be at least 1x1, got {rows}x{cols}")
    n = rows * cols
    adj = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        adj[k, rr * cols + cc] = 1.0
    return adj


def embed_patches(seq: PatchSequence, params: EmbeddingParams) -> Tensor:
    """Project flattened patches and add the position embedding row-wise."""
    proj = params.patch_projection
    pos = params.position_table
    if seq.flat.shape[1] != proj.shape[0]:
        raise DimensionError(
            f"patch row length {seq.flat.shape} does not match projection {proj.shape}"
        )
    if seq.n_patches != pos.shape[0]:
        raise DimensionError(
            f"patch count {seq.n_patches} does not match position table {pos.shape}"
        )
    return ad.add(ad.matmul(ad.constant(seq.flat), proj), pos)


def build_patch_graph(seq: PatchSequence, params: EmbeddingParams, rows: int, cols: int) -> PatchGraph:
    if seq.n_patches != rows * cols:
        raise DimensionError(f"{seq.n_patches} patches cannot fill a {rows}x{cols} grid")
    return PatchGraph(
        n_nodes=seq.n_patches,
        adjacency=build_grid_adjacency(rows, cols),
        features=embed_patches(seq, params),
    )


def augment_master_node(g: PatchGraph) -> PatchGraph:
    """Append a zero-initialized master node connected to every real node."""
    if g.master_index is not None:
        raise DimensionError("graph already has a master node")
    n = g.n_nodes
    adj = np.zeros((n + 1, n + 1))
    adj[:n, :n] = g.adjacency
    adj[n, :n] = 1.0
    adj[:n, n] = 1.0
    features = ad.concat([g.features, ad.constant(np.zeros((1, g.features.shape[1])))], axis=0)
    return PatchGraph(n_nodes=n + 1, adjacency=adj, features=features, master_index=n)


def graph_to_json_dict(g: PatchGraph) -> dict:
    edges = [[int(u), int(v)] for u, v in zip(*np.nonzero(np.triu(g.adjacency)))]
    return {"n": g.n_nodes, "edges": edges, "master": g.master_index}

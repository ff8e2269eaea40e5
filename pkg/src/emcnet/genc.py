"""Graph encoder: iterative message passing over the master-augmented graph.

Every ordered pair of adjacent nodes carries a message vector, initialized
to zero. Each round updates all messages synchronously with

    msg[v->u] = sigmoid(W_g x_v + sum of msg[w->v] over w in N(v) except u)

(the two-line recursion of the update schedule composes into this single
directed-edge rule). After ``rounds`` rounds every node combines its own
feature with its incoming messages, and the graph embedding is the mean of
the node embeddings over all nodes, master included.

The per-edge sums are evaluated in matrix form: an incidence matrix
aggregates all incoming messages per node, and the reverse-edge message is
subtracted to realize the exclusion.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .graph import PatchGraph


@dataclass
class GEncParams:
    W_g: Tensor  # (d, d) shared message transform
    U_g1: Tensor  # (d, d) node self term
    U_g2: Tensor  # (d, d) incoming-message term


@dataclass(frozen=True)
class _EdgeIndex:
    src: tuple[int, ...]
    dst: tuple[int, ...]
    reverse: tuple[int, ...]  # position of (u, v) for each (v, u)
    incoming: np.ndarray  # (n, n_edges) 0/1, sums messages into their dst


@lru_cache(maxsize=16)
def _edge_index(adj_bytes: bytes, n: int) -> _EdgeIndex:
    adj = np.frombuffer(adj_bytes, dtype=np.float64).reshape(n, n)
    edges = [(v, u) for v in range(n) for u in range(n) if adj[v, u]]
    pos = {e: k for k, e in enumerate(edges)}
    src = tuple(v for v, _ in edges)
    dst = tuple(u for _, u in edges)
    reverse = tuple(pos[(u, v)] for v, u in edges)
    incoming = np.zeros((n, len(edges)))
    for k, u in enumerate(dst):
        incoming[u, k] = 1.0
    return _EdgeIndex(src, dst, reverse, incoming)


def edge_index_for(adjacency: np.ndarray) -> _EdgeIndex:
    adjacency = np.ascontiguousarray(adjacency, dtype=np.float64)
    return _edge_index(adjacency.tobytes(), adjacency.shape[0])


def genc_forward(g: PatchGraph, params: GEncParams, rounds: int) -> tuple[Tensor, Tensor]:
    """Run message passing; returns (node embeddings (n, d), graph embedding (1, d))."""
    if g.master_index is None:
        raise DimensionError("graph encoder expects a master-augmented graph")
    if rounds < 1:
        raise DimensionError(f"message rounds must be >= 1, got {rounds}")
    n = g.n_nodes
    idx = edge_index_for(g.adjacency)
    x = g.features
    xw = ad.matmul(x, params.W_g)
    incoming = ad.constant(idx.incoming)

    msgs = ad.constant(np.zeros((len(idx.src), x.shape[1])))
    for _ in range(rounds):
        per_node = ad.matmul(incoming, msgs)  # all incoming sums
        gathered = ad.sub(ad.gather_rows(per_node, idx.src), ad.gather_rows(msgs, idx.reverse))
        msgs = ad.sigmoid(ad.add(ad.gather_rows(xw, idx.src), gathered))

    node_in = ad.matmul(incoming, msgs)
    z = ad.sigmoid(ad.add(ad.matmul(x, params.U_g1), ad.matmul(node_in, params.U_g2)))
    readout = ad.constant(np.full((1, n), 1.0 / n))
    return z, ad.matmul(readout, z)

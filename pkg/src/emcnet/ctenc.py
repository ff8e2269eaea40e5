"""Clique-tree encoder: GRU-gated message passing over the decomposition.

Every directed superedge j->i carries a message updated for a fixed number
of rounds; the update gates the sum of the other messages entering j
against a candidate state, GRU style. Rounds are synchronous: the gate
terms read the previous round's messages, and the candidate sum reads the
round before that (the algorithm annotates the candidate one step behind
the gates; ``strict_sync=True`` collapses both onto the previous round).
With enough rounds to cover the tree diameter, every leaf reaches the root,
whose embedding is the tree-level output.

The per-edge rule lives in :func:`gru_gate`; the forward pass evaluates the
same arithmetic for all edges at once through incidence matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, EmptyInputError
from .genc import edge_index_for
from .treedecomp import CliqueTree


@dataclass
class GRUParams:
    W_z: Tensor  # (d, d)
    U_z: Tensor  # (d, d)
    b_z: Tensor  # (d,)
    W_r: Tensor  # (d, d)
    U_r: Tensor  # (d, d)
    b_r: Tensor  # (d,)
    W: Tensor  # (d, d)
    U: Tensor  # (d, d)


@dataclass
class CTEncParams:
    W_T1: Tensor  # (d, d) supernode self term
    W_T2: Tensor  # (d, d) incoming-message term
    gru: GRUParams


def gru_gate(
    x_j: Tensor,
    incoming: list[Tensor],
    prev_incoming: list[Tensor],
    params: GRUParams,
) -> Tensor:
    """One gated message update from sender supernode j.

    ``incoming`` are the messages entering j (sender excluded) that feed the
    update and reset gates; ``prev_incoming`` are the same edges' messages
    one round earlier, consumed by the candidate state.
    """
    if len(incoming) != len(prev_incoming):
        raise DimensionError(
            f"incoming lists misaligned: {len(incoming)} vs {len(prev_incoming)}"
        )
    p = params
    if incoming:
        s = incoming[0]
        for m in incoming[1:]:
            s = ad.add(s, m)
        gated_prev = None
        for m, m_prev in zip(incoming, prev_incoming):
            r = ad.sigmoid(ad.add(ad.add(ad.matmul(x_j, p.W_r), ad.matmul(m, p.U_r)), p.b_r))
            term = ad.mul(r, m_prev)
            gated_prev = term if gated_prev is None else ad.add(gated_prev, term)
        candidate = ad.tanh(ad.add(ad.matmul(x_j, p.W), ad.matmul(gated_prev, p.U)))
    else:
        s = ad.constant(np.zeros_like(x_j.data))
        candidate = ad.tanh(ad.matmul(x_j, p.W))
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x_j, p.W_z), ad.matmul(s, p.U_z)), p.b_z))
    one_minus_z = ad.sub(ad.constant(np.ones_like(z.data)), z)
    return ad.add(ad.mul(one_minus_z, s), ad.mul(z, candidate))


def _tree_adjacency(tree: CliqueTree) -> np.ndarray:
    m = tree.n_supernodes
    adj = np.zeros((m, m))
    for a, b in tree.edges:
        adj[a, b] = adj[b, a] = 1.0
    return adj


def ctenc_forward(
    tree: CliqueTree,
    params: CTEncParams,
    rounds: int,
    strict_sync: bool = False,
) -> tuple[Tensor, Tensor]:
    """Returns (supernode embeddings (S, d), root embedding (1, d))."""
    if tree.n_supernodes == 0:
        raise EmptyInputError("empty clique tree")
    if rounds < 1:
        raise DimensionError(f"message rounds must be >= 1, got {rounds}")
    x = tree.features
    if x is None:
        raise DimensionError("clique tree has no supernode features")
    p = params.gru

    if tree.edges:
        idx = edge_index_for(_tree_adjacency(tree))
        incoming = ad.constant(idx.incoming)
        xw_z = ad.add(ad.matmul(x, p.W_z), p.b_z)
        xw_r = ad.add(ad.matmul(x, p.W_r), p.b_r)
        xw = ad.matmul(x, p.W)
        n_edges = len(idx.src)
        cur = ad.constant(np.zeros((n_edges, x.shape[1])))
        prev = cur
        ones = ad.constant(np.ones((n_edges, x.shape[1])))
        for _ in range(rounds):
            cand_src = cur if strict_sync else prev
            sum_in = ad.matmul(incoming, cur)
            s_e = ad.sub(ad.gather_rows(sum_in, idx.src), ad.gather_rows(cur, idx.reverse))
            z_e = ad.sigmoid(ad.add(ad.gather_rows(xw_z, idx.src), ad.matmul(s_e, p.U_z)))
            r_e = ad.sigmoid(ad.add(ad.gather_rows(xw_r, idx.dst), ad.matmul(cur, p.U_r)))
            gated = ad.mul(r_e, cand_src)
            gated_sum = ad.matmul(incoming, gated)
            cand_e = ad.sub(ad.gather_rows(gated_sum, idx.src), ad.gather_rows(gated, idx.reverse))
            m_tilde = ad.tanh(ad.add(ad.gather_rows(xw, idx.src), ad.matmul(cand_e, p.U)))
            new = ad.add(ad.mul(ad.sub(ones, z_e), s_e), ad.mul(z_e, m_tilde))
            prev, cur = cur, new
        node_in = ad.matmul(incoming, cur)
        h = ad.sigmoid(ad.add(ad.matmul(x, params.W_T1), ad.matmul(node_in, params.W_T2)))
    else:
        h = ad.sigmoid(ad.matmul(x, params.W_T1))
    return h, ad.gather_rows(h, [tree.root])

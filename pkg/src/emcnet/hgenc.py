"""Hierarchical graph encoder: attention convolution and top-k pooling.

Each layer widens node features from d to 2d with a neighbourhood attention
convolution, scores nodes by projecting onto a normalized learned vector,
keeps the ceil(ratio * n) best-scoring nodes (ties to the lower index),
gates the kept rows by their rectified scores, and contracts back to d with
scaled dot-product self-attention masked to the pooled neighbourhood plus
self. Three stacked layers feed a global average readout.

Attention weights live in matrices indexed [sender, receiver]; every
normalization therefore runs down a column over the senders admitted by
the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError

_MASK_OFF = -1e30  # pushes excluded logits to exp(.) == 0 exactly


@dataclass
class HGEncLayerParams:
    W_conv: Tensor  # (d, 2d)
    a_attn: Tensor  # (4d, 1) scoring vector over concatenated endpoint pairs
    p_vec: Tensor  # (2d, 1) projection vector for node ranking
    W_Q: Tensor  # (2d, d)
    W_K: Tensor  # (2d, d)
    W_V: Tensor  # (2d, d)


@dataclass
class PooledGraph:
    idx: np.ndarray  # kept original-node indices, descending score
    adjacency: np.ndarray  # (m, m) restriction of the parent adjacency
    features: Tensor  # (m, 2d) gated rows
    scores: Tensor  # (m, 1) rectified gate values


def _masked_softmax_columns(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Column-wise softmax over the rows admitted by the binary mask."""
    masked = ad.add(ad.mul(logits, ad.constant(mask)), ad.constant((1.0 - mask) * _MASK_OFF))
    col_max = masked.data.max(axis=0)  # detached shift; softmax is shift-invariant
    e = ad.exp(ad.sub(masked, ad.constant(col_max)))
    return ad.div(e, ad.reduce_sum(e, axis=0))


def attention_coefficients(
    features: Tensor, adjacency: np.ndarray, params: HGEncLayerParams
) -> tuple[Tensor, Tensor]:
    """Transformed features r and attention matrix alpha[sender, receiver]."""
    n = features.shape[0]
    r = ad.matmul(features, params.W_conv)
    two_d = r.shape[1]
    a_dst = ad.gather_rows(params.a_attn, range(two_d))
    a_src = ad.gather_rows(params.a_attn, range(two_d, 2 * two_d))
    t_dst = ad.matmul(r, a_dst)  # contribution of the receiving endpoint
    t_src = ad.matmul(r, a_src)
    ones_col = ad.constant(np.ones((n, 1)))
    pair = ad.add(ad.matmul(ones_col, ad.transpose(t_dst)), ad.matmul(t_src, ad.transpose(ones_col)))
    zeta = ad.relu(pair)
    alpha = _masked_softmax_columns(zeta, adjacency + np.eye(n))
    return r, alpha


def attention_conv(features: Tensor, adjacency: np.ndarray, params: HGEncLayerParams) -> Tensor:
    """Neighbourhood attention convolution, d -> 2d per node."""
    r, alpha = attention_coefficients(features, adjacency, params)
    return ad.relu(ad.matmul(ad.transpose(alpha), r))


def score_and_select(hidden: Tensor, p_vec: Tensor, ratio: float) -> tuple[np.ndarray, Tensor]:
    """Rank nodes by normalized projection; keep the top ceil(ratio * n)."""
    if not 0.0 < ratio <= 1.0:
        raise DimensionError(f"pooling ratio must be in (0, 1], got {ratio}")
    norm = float(np.linalg.norm(p_vec.data))
    if norm == 0.0:
        raise NumericError("projection vector has zero norm")
    unit = ad.div(p_vec, ad.sqrt(ad.reduce_sum(ad.mul(p_vec, p_vec))))
    scores = ad.matmul(hidden, unit)  # (n, 1)
    n = hidden.shape[0]
    m = int(np.ceil(ratio * n))
    order = np.argsort(-scores.data[:, 0], kind="stable")  # ties: lower index first
    return order[:m], scores


def pool_and_gate(
    hidden: Tensor, adjacency: np.ndarray, idx: np.ndarray, raw_scores: Tensor
) -> PooledGraph:
    """Restrict to the kept nodes and scale each row by its rectified score."""
    kept = ad.gather_rows(hidden, idx)
    gate = ad.relu(ad.gather_rows(raw_scores, idx))
    width = hidden.shape[1]
    gated = ad.mul(kept, ad.matmul(gate, ad.constant(np.ones((1, width)))))
    sub_adj = adjacency[np.ix_(idx, idx)]
    return PooledGraph(idx=np.asarray(idx), adjacency=sub_adj, features=gated, scores=gate)


def pooled_self_attention(pooled: PooledGraph, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """Scaled dot-product attention over pooled neighbourhoods, 2d -> d."""
    z = pooled.features
    q = ad.matmul(z, w_q)
    k = ad.matmul(z, w_k)
    v = ad.matmul(z, w_v)
    d = q.shape[1]
    logits = ad.scale(ad.matmul(k, ad.transpose(q)), 1.0 / np.sqrt(d))  # [sender, receiver]
    m = z.shape[0]
    alpha = _masked_softmax_columns(logits, pooled.adjacency + np.eye(m))
    return ad.matmul(ad.transpose(alpha), v)


def hgenc_forward(
    features: Tensor,
    adjacency: np.ndarray,
    layers: list[HGEncLayerParams],
    ratio: float,
    trace: list | None = None,
) -> Tensor:
    """Stack the pooling layers and average the surviving node embeddings."""
    x, adj = features, adjacency
    for level, params in enumerate(layers):
        hidden = attention_conv(x, adj, params)
        idx, scores = score_and_select(hidden, params.p_vec, ratio)
        pooled = pool_and_gate(hidden, adj, idx, scores)
        x = pooled_self_attention(pooled, params.W_Q, params.W_K, params.W_V)
        adj = pooled.adjacency
        if trace is not None:
            trace.append(
                {
                    "layer": level,
                    "kept": [int(i) for i in idx],
                    "scores": [float(s) for s in scores.data[idx, 0]],
                }
            )
    m = x.shape[0]
    return ad.matmul(ad.constant(np.full((1, m), 1.0 / m)), x)

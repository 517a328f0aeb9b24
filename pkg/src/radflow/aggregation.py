"""Neighbor aggregation producing the additive network forecast term.

All functions work on arbitrary leading batch dimensions: the ego embedding
is ``(..., E)``, neighbor embeddings ``(..., K, E)`` and the presence mask
``(..., K)``. Absent slots never influence the result, so callers can pad
neighbor lists to a fixed ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .recurrent import ModelConfig
from .tensor import Tensor


def init_aggregation_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    H, E, D = config.hidden, config.embed_dim, config.dim
    bound = 1.0 / np.sqrt(H)

    def u(*shape):
        return T.parameter(rng.uniform(-bound, bound, size=shape))

    p: dict[str, Tensor] = {}
    if config.hops == 0:
        return p
    if config.variant == "attention":
        dh = H // config.heads
        p["agg.W_Q"] = u(H, E)
        p["agg.W_K"] = u(H, E)
        p["agg.W_V"] = u(H, E)
        if config.zero_attention:
            p["agg.null_key"] = u(config.heads, dh)
            p["agg.null_value"] = u(config.heads, dh)
        value_dim = H
    else:
        value_dim = E
    if not config.direct_combine:
        p["agg.W_E"] = u(H, E)
        p["agg.W_N"] = u(H, value_dim)
    p["agg.W_A"] = u(D, config.combined_dim)
    return p


@dataclass
class AttentionTrace:
    """Attention weights of one aggregation call.

    ``scores`` has shape (..., heads, 1 + K) with the null slot first (or
    (..., heads, K) when zero attention is disabled). ``mask`` is the neighbor
    presence mask (..., K).
    """

    scores: np.ndarray
    mask: np.ndarray
    has_null: bool

    @property
    def neighbor_scores(self) -> np.ndarray:
        """Per-head weights on real neighbors, (..., heads, K)."""
        return self.scores[..., 1:] if self.has_null else self.scores

    @property
    def null_scores(self) -> np.ndarray:
        if not self.has_null:
            return np.zeros(self.scores.shape[:-1])
        return self.scores[..., 0]

    def mean_over_heads(self) -> np.ndarray:
        """Head-averaged weight per neighbor, (..., K)."""
        return self.neighbor_scores.mean(axis=-2)


def aggregate_attention(params, config: ModelConfig, ego, neighbors, mask: np.ndarray):
    """Multi-head dot-product attention over neighbors plus an optional null slot.

    Returns ``(u_tilde, trace)``; ``u_tilde`` is GELU of the head-concatenated
    weighted values, shape (..., H).
    """
    ego, neighbors = T._as_tensor(ego), T._as_tensor(neighbors)
    mask = np.asarray(mask, dtype=bool)
    H, nh = config.hidden, config.heads
    dh = H // nh
    prefix = ego.shape[:-1]
    K = neighbors.shape[-2]
    nd = len(prefix)
    if K == 0 and not config.zero_attention:
        # nothing to attend to: same result as an all-absent neighborhood
        zero = T.tensor(np.zeros(prefix + (H,), ego.data.dtype))
        return T.gelu(zero), AttentionTrace(np.zeros(prefix + (nh, 0)), mask, False)

    q = T.reshape(T.linear(ego, params["agg.W_Q"]), prefix + (nh, dh))
    k = T.reshape(T.linear(neighbors, params["agg.W_K"]), prefix + (K, nh, dh))
    v = T.reshape(T.linear(neighbors, params["agg.W_V"]), prefix + (K, nh, dh))
    head_first = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    k = T.transpose(k, tuple(range(nd)) + (nd + 1, nd + 2, nd))  # (..., nh, dh, K)
    v = T.transpose(v, head_first)  # (..., nh, K, dh)

    scores = T.reshape(T.matmul(T.reshape(q, prefix + (nh, 1, dh)), k), prefix + (nh, K))
    head_mask = np.broadcast_to(mask[..., None, :], prefix + (nh, K))
    has_null = config.zero_attention
    if has_null:
        s_null = T.sum_(T.mul(q, params["agg.null_key"]), axis=-1, keepdims=True)
        scores = T.concat([s_null, scores], axis=-1)
        full_mask = np.concatenate([np.ones(prefix + (nh, 1), bool), head_mask], axis=-1)
        any_present = None
    else:
        any_present = head_mask.any(axis=-1, keepdims=True)
        full_mask = head_mask.copy()
        if K:
            full_mask[..., :1] |= ~any_present
    scores = T.mul(scores, 1.0 / np.sqrt(dh))
    lam = T.softmax(scores, axis=-1, mask=full_mask)

    lam_nb = lam[..., 1:] if has_null else lam
    if any_present is not None:
        lam_nb = T.mul(lam_nb, any_present.astype(lam.data.dtype))
    mixed = T.reshape(T.matmul(T.reshape(lam_nb, prefix + (nh, 1, K)), v), prefix + (nh, dh))
    if has_null:
        mixed = mixed + T.mul(lam[..., :1], params["agg.null_value"])
    u_tilde = T.gelu(T.reshape(mixed, prefix + (H,)))
    trace_lam = lam.data if any_present is None else lam.data * any_present
    return u_tilde, AttentionTrace(trace_lam, mask, has_null)


def aggregate_graphsage(neighbors, mask: np.ndarray) -> Tensor:
    """Plain mean of present neighbor embeddings; zero when none are present."""
    neighbors = T._as_tensor(neighbors)
    m = np.asarray(mask, dtype=neighbors.data.dtype)[..., None]
    count = np.maximum(m.sum(axis=-2), 1.0)
    return T.mul(T.sum_(T.mul(neighbors, m), axis=-2), 1.0 / count)


def combine_ego(params, config: ModelConfig, ego, u_tilde) -> Tensor:
    if config.direct_combine:
        return T.add(ego, u_tilde)
    return T.add(T.linear(ego, params["agg.W_E"]), T.linear(u_tilde, params["agg.W_N"]))


def network_forecast(params, u_hat) -> Tensor:
    return T.linear(u_hat, params["agg.W_A"])


def combine_forecast(v_rec, v_net) -> Tensor:
    v_rec, v_net = T._as_tensor(v_rec), T._as_tensor(v_net)
    if v_rec.shape != v_net.shape:
        raise ValueError(f"shape mismatch {v_rec.shape} vs {v_net.shape}")
    return T.add(v_rec, v_net)


def aggregate(params, config: ModelConfig, ego, neighbors, mask):
    """Dispatch on the configured variant. Returns ``(u_tilde, trace or None)``."""
    if config.variant == "attention":
        return aggregate_attention(params, config, ego, neighbors, mask)
    return aggregate_graphsage(neighbors, mask), None


def two_hop_embed(params, config: ModelConfig, hop1, hop2, mask2):
    """Replace each first-hop embedding (..., K, E) by its own combined vector
    built from its neighbors (..., K, K2, E) with presence ``mask2``."""
    u_tilde, trace = aggregate(params, config, hop1, hop2, mask2)
    return combine_ego(params, config, hop1, u_tilde), trace


def network_term(params, config: ModelConfig, ego, neighbors, mask, hop2=None, mask2=None):
    """Full network forecast term for one or more steps.

    Returns ``(v_net, u_hat, trace, trace2)`` where ``trace2`` belongs to the
    inner hop of a two-hop aggregation.
    """
    trace2 = None
    if config.hops == 2:
        if hop2 is None:
            raise ValueError("two-hop aggregation needs second-hop embeddings")
        neighbors, trace2 = two_hop_embed(params, config, neighbors, hop2, mask2)
    u_tilde, trace = aggregate(params, config, ego, neighbors, mask)
    u_hat = combine_ego(params, config, ego, u_tilde)
    return network_forecast(params, u_hat), u_hat, trace, trace2

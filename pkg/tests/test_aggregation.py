import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radflow import tensor as T
from radflow.aggregation import (
    aggregate,
    aggregate_attention,
    aggregate_graphsage,
    combine_ego,
    combine_forecast,
    network_forecast,
    network_term,
)
from radflow.model import Radflow
from radflow.recurrent import ModelConfig


def cfg_for(**kw):
    base = dict(backcast=4, horizon=2, hidden=4, layers=1, heads=2, hops=1, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def params_for(cfg, seed=0):
    return Radflow.initialize(cfg, seed).params


def gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


# ---------------------------------------------------------------- attention


def test_no_neighbors_attends_to_null():
    cfg = cfg_for()
    p = params_for(cfg)
    ego = np.random.default_rng(0).standard_normal(4)
    u, tr = aggregate_attention(p, cfg, ego, np.zeros((0, 4)), np.zeros(0, bool))
    np.testing.assert_array_equal(tr.null_scores, [1.0, 1.0])
    expect = [gelu(v) for v in p["agg.null_value"].data.reshape(-1)]
    np.testing.assert_allclose(u.data, expect, atol=1e-15)


def test_masked_neighbors_equal_no_neighbors():
    cfg = cfg_for()
    p = params_for(cfg)
    ego = np.ones(4)
    nb = np.random.default_rng(1).standard_normal((3, 4))
    a, _ = aggregate_attention(p, cfg, ego, nb, np.zeros(3, bool))
    b, _ = aggregate_attention(p, cfg, ego, np.zeros((0, 4)), np.zeros(0, bool))
    np.testing.assert_array_equal(a.data, b.data)


def test_identical_neighbors_share_weight_without_null():
    cfg = cfg_for(zero_attention=False)
    p = params_for(cfg)
    nb = np.tile(np.random.default_rng(2).standard_normal(4), (5, 1))
    _, tr = aggregate_attention(p, cfg, np.ones(4), nb, np.ones(5, bool))
    np.testing.assert_allclose(tr.scores, np.full((2, 5), 0.2), atol=1e-15)


def test_one_dim_head_scores():
    cfg = cfg_for(hidden=1, heads=1, zero_attention=False)
    p = params_for(cfg)
    p["agg.W_Q"].data[...] = 1.0
    p["agg.W_K"].data[...] = 1.0
    _, tr = aggregate_attention(p, cfg, np.array([1.0]), np.array([[1.0], [2.0]]), np.ones(2, bool))
    e1, e2 = math.exp(1), math.exp(2)
    np.testing.assert_allclose(tr.scores[0], [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-15)
    np.testing.assert_allclose(tr.scores[0], [0.26894, 0.73106], atol=1e-5)


def test_no_null_and_no_neighbors_gives_gelu_zero():
    cfg = cfg_for(zero_attention=False)
    p = params_for(cfg)
    u, tr = aggregate_attention(p, cfg, np.ones(4), np.zeros((2, 4)), np.zeros(2, bool))
    assert not u.data.any()
    assert not tr.scores.any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 6), st.sampled_from([1, 2, 4]), st.booleans(), st.integers(0, 10_000))
def test_attention_simplex_and_permutation(K, heads, null, seed):
    cfg = cfg_for(heads=heads, zero_attention=null)
    p = params_for(cfg, seed)
    rng = np.random.default_rng(seed)
    ego = rng.standard_normal((3, 4)) * 3
    nb = rng.standard_normal((3, K, 4)) * 3
    mask = rng.random((3, K)) < 0.7
    u, tr = aggregate_attention(p, cfg, ego, nb, mask)
    assert (tr.scores >= 0).all()
    sums = tr.scores.sum(-1)
    live = mask.any(-1)[:, None] | null
    np.testing.assert_allclose(sums[np.broadcast_to(live, sums.shape)], 1.0, atol=1e-12)
    assert not tr.neighbor_scores[np.broadcast_to(~mask[:, None, :], tr.neighbor_scores.shape)].any()
    perm = rng.permutation(K)
    u2, tr2 = aggregate_attention(p, cfg, ego, nb[:, perm], mask[:, perm])
    np.testing.assert_allclose(u2.data, u.data, atol=1e-12)
    np.testing.assert_allclose(tr2.neighbor_scores, tr.neighbor_scores[..., perm], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_graphsage_permutation(K, seed):
    rng = np.random.default_rng(seed)
    nb = rng.standard_normal((2, K, 3))
    mask = rng.random((2, K)) < 0.6
    perm = rng.permutation(K)
    a = aggregate_graphsage(nb, mask).data
    b = aggregate_graphsage(nb[:, perm], mask[:, perm]).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    for i in range(2):
        expect = nb[i][mask[i]].mean(0) if mask[i].any() else np.zeros(3)
        np.testing.assert_allclose(a[i], expect, atol=1e-12)


def test_variant_reduction_to_gelu_mean():
    cfg = cfg_for(heads=1, zero_attention=False)
    p = params_for(cfg)
    p["agg.W_V"].data[...] = np.eye(4)
    p["agg.W_K"].data[...] = 0.0  # equal keys for every neighbor
    nb = np.random.default_rng(3).standard_normal((5, 4))
    u, _ = aggregate_attention(p, cfg, np.ones(4), nb, np.ones(5, bool))
    np.testing.assert_allclose(u.data, [gelu(v) for v in nb.mean(0)], atol=1e-12)


# ---------------------------------------------------------------- graphsage, combination, output


def test_graphsage_examples():
    np.testing.assert_array_equal(aggregate_graphsage(np.array([[1.0, 2.0]]), np.ones(1, bool)).data, [1.0, 2.0])
    np.testing.assert_array_equal(
        aggregate_graphsage(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2, bool)).data, [0.5, 0.5]
    )
    np.testing.assert_array_equal(aggregate_graphsage(np.zeros((0, 2)), np.zeros(0, bool)).data, [0.0, 0.0])


def test_combine_ego_examples():
    cfg = cfg_for(hidden=2, heads=1)
    p = params_for(cfg)
    ego = np.array([1.0, 2.0])
    np.testing.assert_allclose(combine_ego(p, cfg, ego, np.zeros(2)).data, p["agg.W_E"].data @ ego)
    p["agg.W_E"].data[...] = np.eye(2)
    p["agg.W_N"].data[...] = np.eye(2)
    np.testing.assert_array_equal(combine_ego(p, cfg, ego, np.array([3.0, 4.0])).data, [4.0, 6.0])
    direct = cfg_for(hidden=2, heads=1, variant="meanpool")
    np.testing.assert_array_equal(combine_ego({}, direct, ego, np.array([3.0, 4.0])).data, [4.0, 6.0])


def test_network_and_combined_forecast():
    p = {"agg.W_A": T.parameter(np.zeros((1, 3)))}
    assert network_forecast(p, T.tensor([1.0, 2.0, 3.0])).data.tolist() == [0.0]
    p["agg.W_A"].data[...] = 1.0
    assert network_forecast(p, T.tensor([1.0, 2.0, 3.0])).data.tolist() == [6.0]
    p = {"agg.W_A": T.parameter(np.eye(2))}
    assert network_forecast(p, T.tensor([1.5, -2.0])).data.tolist() == [1.5, -2.0]
    assert combine_forecast(np.array([3.0]), np.array([-1.0])).data.tolist() == [2.0]
    assert combine_forecast(np.array([3.0]), np.array([0.0])).data.tolist() == [3.0]
    with pytest.raises(ValueError):
        combine_forecast(np.array([3.0]), np.array([0.0, 1.0]))


# ---------------------------------------------------------------- two hops


def test_two_hop_empty_inner_neighborhood():
    cfg = cfg_for(hops=2)
    p = params_for(cfg)
    rng = np.random.default_rng(4)
    ego, hop1 = rng.standard_normal(4), rng.standard_normal((2, 4))
    _, u_hat, _, _ = network_term(p, cfg, ego, hop1, np.ones(2, bool), np.zeros((2, 0, 4)), np.zeros((2, 0), bool))
    # inner u_tilde is GELU(null value), so each neighbor becomes W_E u + W_N GELU(nv)
    null_u = T.gelu(T.tensor(p["agg.null_value"].data.reshape(-1))).data
    inner = hop1 @ p["agg.W_E"].data.T + p["agg.W_N"].data @ null_u
    u_t, _ = aggregate_attention(p, cfg, ego, inner, np.ones(2, bool))
    np.testing.assert_allclose(u_hat.data, p["agg.W_E"].data @ ego + p["agg.W_N"].data @ u_t.data, atol=1e-12)

    mp = cfg_for(hops=2, variant="meanpool")
    pm = params_for(mp)
    u_m, _ = aggregate(pm, mp, hop1, np.zeros((2, 0, 4)), np.zeros((2, 0), bool))
    np.testing.assert_array_equal(u_m.data, np.zeros((2, 4)))


@pytest.mark.parametrize("variant", ["attention", "graphsage", "meanpool"])
def test_two_hop_zero_weights_zero_term(variant):
    cfg = cfg_for(hops=2, variant=variant)
    p = params_for(cfg)
    for k, v in p.items():
        if k.startswith("agg."):
            v.data[...] = 0.0
    rng = np.random.default_rng(5)
    v, _, _, _ = network_term(p, cfg, rng.standard_normal(4), rng.standard_normal((3, 4)), np.ones(3, bool),
                              rng.standard_normal((3, 2, 4)), np.ones((3, 2), bool))
    assert not v.data.any()


def test_two_hop_star_matches_recursive_expansion():
    # ego 0 <- {1, 2}; 1 <- {3, 4}; 2 <- {} ; all one-dimensional
    cfg = cfg_for(hidden=1, heads=1, hops=2)
    a, b, c, nk, nv, e, n, w = 0.8, -1.1, 1.3, 0.4, -0.6, 0.9, 1.7, 0.5
    p = {"agg.W_Q": a, "agg.W_K": b, "agg.W_V": c, "agg.null_key": nk, "agg.null_value": nv,
         "agg.W_E": e, "agg.W_N": n, "agg.W_A": w}
    p = {k: T.parameter(np.array(v).reshape((1, 1))) for k, v in p.items()}
    u = {0: 0.3, 1: -0.7, 2: 1.2, 3: 2.0, 4: -0.4}

    def attend(q, ks):
        s = [a * q * nk] + [a * q * b * x for x in ks]
        m = max(s)
        ex = [math.exp(x - m) for x in s]
        lam = [x / sum(ex) for x in ex]
        return gelu(lam[0] * nv + sum(l * c * x for l, x in zip(lam[1:], ks)))

    def hat(node, ks):
        return e * u[node] + n * attend(u[node], ks)

    inner = [hat(1, [u[3], u[4]]), hat(2, [])]
    expect = w * (e * u[0] + n * attend(u[0], inner))

    hop2 = np.array([[[u[3]], [u[4]]], [[0.0], [0.0]]])
    mask2 = np.array([[True, True], [False, False]])
    v, _, _, _ = network_term(p, cfg, np.array([u[0]]), np.array([[u[1]], [u[2]]]), np.ones(2, bool), hop2, mask2)
    assert v.data[0] == pytest.approx(expect, abs=1e-12)


def test_network_term_needs_second_hop():
    cfg = cfg_for(hops=2)
    with pytest.raises(ValueError):
        network_term(params_for(cfg), cfg, np.ones(4), np.ones((1, 4)), np.ones(1, bool))


def test_zero_aggregation_params_leave_forecast_unchanged():
    from radflow.model import WindowBatch
    from radflow.recurrent import to_log

    cfg = ModelConfig(backcast=5, horizon=3, hidden=4, layers=2, heads=2, hops=1, dropout=0.0)
    m = Radflow.initialize(cfg, 1)
    m.params["agg.W_A"].data[...] = 0.0
    rng = np.random.default_rng(0)
    b = WindowBatch(ego=to_log(rng.uniform(0, 9, (2, 8, 1))), hop1=to_log(rng.uniform(0, 9, (2, 3, 8, 1))),
                    mask1=np.ones((2, 3, 3), bool))
    r = m.forecast(b)
    assert not r.network.any()
    np.testing.assert_array_equal(r.forecast, r.recurrent)

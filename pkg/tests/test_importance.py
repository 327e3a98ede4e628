from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridprune.importance import (
    ActivationStats,
    ScoreSet,
    channel_scores,
    collect_stats,
    compute_scores,
    embedding_sites,
    flap_from_stats,
    head_scores,
    kl_divergence,
    layer_importance_kld,
    score_attention_heads,
    score_embedding,
    score_ffn,
    score_flap,
    score_mamba,
    select_channels,
)
from hybridprune.model import block_forward, init_model, model_forward
from hybridprune.numkit import ParameterError, UsageError

from .conftest import randomize, small_config

# ---------------------------------------------------------------------------
# hand-rolled oracles (no ActivationStats involved)
# ---------------------------------------------------------------------------


def layer_inputs(model, seq, layer):
    h = model.embed[seq]
    for i in range(layer):
        h = h + block_forward(model, i, h).data
    return h


def rms(h, w, model):
    cfg = model.config
    return h / np.sqrt((h * h).sum(axis=-1, keepdims=True) / cfg.embed_norm_dim + cfg.norm_eps) * w


def mean_l2(per_seq: list[np.ndarray]) -> np.ndarray:
    means = np.stack([a.mean(axis=0) for a in per_seq])
    return np.sqrt((means ** 2).sum(axis=0))


def oracle_mamba(model, layer, calib):
    w = model.layers[layer]
    acts = [rms(layer_inputs(model, s, layer), w.norm, model) @ w.W_x for s in calib]
    return mean_l2(acts).reshape(w.m_h, w.m_d)


def oracle_ffn(model, layer, calib):
    w = model.layers[layer]
    return mean_l2([rms(layer_inputs(model, s, layer), w.norm, model) @ w.W_1.T for s in calib])


def oracle_flap_ffn(model, layer, calib):
    w = model.layers[layer]
    hidden = []
    for s in calib:
        pre = rms(layer_inputs(model, s, layer), w.norm, model) @ w.W_1.T
        hidden.append(np.maximum(pre, 0.0) ** 2)
    X = np.concatenate(hidden)
    mu = X.sum(axis=0) / X.shape[0]
    var = ((X - mu) ** 2).sum(axis=0) / (X.shape[0] - 1)
    return (w.W_2 ** 2).sum(axis=0) * var


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


def test_worked_mamba_example():
    s = np.array([[1.0, -2.0], [3.0, 4.0]])
    s_d = channel_scores(s)
    assert np.allclose(s_d, [math.sqrt(10), math.sqrt(20)], rtol=0, atol=1e-15)
    assert round(s_d[0], 3) == 3.162 and round(s_d[1], 3) == 4.472
    top = select_channels(s_d, 1)
    assert top == [1]
    assert np.array_equal(head_scores(s, top), [2.0, 4.0])
    assert np.allclose(head_scores(s, [0, 1]), np.linalg.norm(s, axis=1), rtol=0, atol=1e-15)


def test_worked_ffn_example():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    stats = ActivationStats(1).update(X @ np.array([[1.0], [1.0]]))
    assert stats.aggregate()[0] == 1.0


def test_worked_flap_example():
    stats = ActivationStats(1).update(np.array([[0.0], [2.0]]))
    col = np.array([1.0, 1.0])
    assert flap_from_stats(np.array([(col ** 2).sum()]), stats)[0] == 4.0


def test_worked_kl_example():
    kl = kl_divergence(np.log([[0.5, 0.5]]), np.log([[0.75, 0.25]]))[0]
    assert abs(kl - (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))) <= 1e-15
    assert round(kl, 4) == 0.1438


def test_select_channels_rules():
    assert select_channels([1.0, 1.0, 1.0], 2) == [0, 1]
    assert select_channels([3.0, 1.0, 2.0], 3) == [0, 1, 2]
    with pytest.raises(ParameterError):
        select_channels([1.0, 2.0], 0)
    with pytest.raises(ParameterError):
        select_channels([1.0, 2.0], 3)
    assert np.array_equal(head_scores(np.array([[0.0, 0.0], [1.0, 1.0]]), [0, 1])[:1], [0.0])


# ---------------------------------------------------------------------------
# oracles on a model
# ---------------------------------------------------------------------------


def test_score_mamba_matches_oracle(model, calib):
    for layer in (0, 4):
        s, s_d = score_mamba(model, layer, calib)
        ref = oracle_mamba(model, layer, calib)
        assert np.max(np.abs(s - ref)) <= 1e-9
        assert np.max(np.abs(s_d - np.sqrt((ref ** 2).sum(axis=0)))) <= 1e-9


def test_score_ffn_matches_oracle(model, calib):
    for layer in (1, 3, 5):
        assert np.max(np.abs(score_ffn(model, layer, calib) - oracle_ffn(model, layer, calib))) <= 1e-9


def test_score_flap_matches_two_pass_oracle(model, calib):
    for layer in (1, 3):
        ref = oracle_flap_ffn(model, layer, calib)
        assert np.max(np.abs(score_flap(model, layer, calib) - ref)) <= 1e-9 * max(1.0, np.max(ref))


def test_flap_mamba_and_attention_two_pass(model, calib):
    stats = collect_stats(model, calib)
    for layer, site, W in ((0, "0.out_proj_in", model.layers[0].W_O), (2, "2.head_out", model.layers[2].W_o)):
        acts = []
        for seq in calib:
            trace: dict = {}
            model_forward(model, seq, trace=trace)
            acts.append(trace[site].reshape(len(seq), -1))
        X = np.concatenate(acts)
        var = X.var(axis=0, ddof=1)
        ref = (W ** 2).sum(axis=1) * var
        assert np.max(np.abs(score_flap(model, layer, None, stats) - ref)) <= 1e-9


def test_zero_wx_gives_zero_channel_scores(model, calib):
    layers = list(model.layers)
    layers[0] = dataclasses.replace(layers[0], W_x=np.zeros_like(layers[0].W_x))
    zeroed = dataclasses.replace(model, layers=layers)
    assert np.array_equal(score_mamba(zeroed, 0, calib)[1], np.zeros(zeroed.config.m_d))


def test_zero_ffn_row_and_flap_edge_cases(model, calib):
    layers = list(model.layers)
    W_1, W_2 = np.array(layers[1].W_1), np.array(layers[1].W_2)
    W_1[3] = 0.0
    W_2[:, 5] = 0.0
    layers[1] = dataclasses.replace(layers[1], W_1=W_1, W_2=W_2)
    m = dataclasses.replace(model, layers=layers)
    assert score_ffn(m, 1, calib)[3] == 0.0
    S = score_flap(m, 1, calib)
    assert S[3] == 0.0 and S[5] == 0.0
    const = ActivationStats(2)
    const.update(np.tile([3.0, -1.0], (5, 1)))
    assert np.array_equal(flap_from_stats(np.array([7.0, 9.0]), const), [0.0, 0.0])


def test_wrong_layer_kind(model, calib):
    with pytest.raises(UsageError):
        score_ffn(model, 0, calib)
    with pytest.raises(UsageError):
        score_mamba(model, 1, calib)
    with pytest.raises(UsageError):
        score_attention_heads(model, 0, calib)


def test_empty_calibration(model):
    with pytest.raises(UsageError):
        score_mamba(model, 0, [])
    with pytest.raises(UsageError):
        compute_scores(model, [])
    with pytest.raises(UsageError):
        layer_importance_kld(model, [])


def test_variance_needs_two_samples():
    st_ = ActivationStats(3).update(np.ones((1, 3)))
    with pytest.raises(UsageError):
        st_.variance()


# ---------------------------------------------------------------------------
# streaming and merging
# ---------------------------------------------------------------------------


def test_streaming_equals_batch_exactly(model, calib):
    whole = collect_stats(model, calib)
    streamed: dict = {}
    for chunk in np.array_split(calib, 4):
        collect_stats(model, chunk, stats=streamed)
    for site, st_ in whole.items():
        assert st_.aggregate().tobytes() == streamed[site].aggregate().tobytes()
        assert st_.aggregate("sum").tobytes() == streamed[site].aggregate("sum").tobytes()
        assert np.max(np.abs(st_.variance() - streamed[site].variance())) <= 1e-9 * max(1.0, st_.variance().max())


@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**31))
def test_merge_equals_concatenation(n_parts, n_feat, seed):
    rng = np.random.default_rng(seed)
    seqs = [rng.normal(size=(rng.integers(1, 9), n_feat)) * rng.uniform(0.1, 10) for _ in range(n_parts * 2)]
    whole = ActivationStats(n_feat)
    for s in seqs:
        whole.update(s)
    parts = [ActivationStats(n_feat) for _ in range(n_parts)]
    for i, s in enumerate(seqs):
        parts[i * n_parts // len(seqs)].update(s)
    merged = parts[0]
    for p in parts[1:]:
        merged.merge(p)
    assert merged.aggregate().tobytes() == whole.aggregate().tobytes()
    X = np.concatenate(seqs)
    if X.shape[0] >= 2:
        assert np.max(np.abs(merged.variance() - X.var(axis=0, ddof=1))) <= 1e-9 * max(1.0, X.var(axis=0).max())


@given(st.floats(0.01, 100), st.integers(0, 2**31))
def test_scaling_activations_scales_scores(c, seed):
    rng = np.random.default_rng(seed)
    seqs = [rng.normal(size=(5, 6)) for _ in range(3)]
    a, b = ActivationStats(6), ActivationStats(6)
    for s in seqs:
        a.update(s)
        b.update(c * s)
    assert np.allclose(b.aggregate(), c * a.aggregate(), rtol=1e-12, atol=0)
    assert np.array_equal(np.argsort(-a.aggregate(), kind="stable"), np.argsort(-b.aggregate(), kind="stable"))


def test_duplicating_calibration_keeps_rankings(model, calib):
    doubled = np.concatenate([calib, calib])
    for fn, layer in ((score_ffn, 1), (score_attention_heads, 2)):
        a, b = fn(model, layer, calib), fn(model, layer, doubled)
        assert np.allclose(b, math.sqrt(2) * a, rtol=1e-12)
        assert np.array_equal(np.argsort(-a, kind="stable"), np.argsort(-b, kind="stable"))


def test_raw_sum_variant(model, calib):
    s_sum, _ = score_mamba(model, 0, calib, aggregation="sum")
    w = model.layers[0]
    acts = [rms(layer_inputs(model, s, 0), w.norm, model) @ w.W_x for s in calib]
    ref = sum(a.sum(axis=0) for a in acts).reshape(w.m_h, w.m_d)
    assert np.max(np.abs(s_sum - ref)) <= 1e-9
    with pytest.raises(ParameterError):
        score_mamba(model, 0, calib, aggregation="median")


# ---------------------------------------------------------------------------
# embedding and attention
# ---------------------------------------------------------------------------


def test_embedding_is_sum_of_sites(model, calib):
    total = score_embedding(model, calib)
    per_site = sum(collect_stats(model, calib, [s])[s].aggregate() for s in embedding_sites(model))
    assert np.max(np.abs(total - per_site)) <= 1e-12
    one = randomize(init_model(small_config(layer_pattern="F"), 0), 1)
    assert np.array_equal(score_embedding(one, calib), collect_stats(one, calib, ["0.norm_out"])["0.norm_out"].aggregate())


def test_zero_residual_stream_gives_zero_embedding_scores(cfg, calib):
    m = init_model(cfg, 0, zeros=True)
    assert np.array_equal(score_embedding(m, calib), np.zeros(cfg.d_e))


def test_attention_head_scores(model, calib):
    layers = list(model.layers)
    W_v = np.array(layers[2].W_v)
    hd = layers[2].head_dim
    W_v[:, hd:2 * hd] = 0.0
    layers[2] = dataclasses.replace(layers[2], W_v=W_v)
    m = dataclasses.replace(model, layers=layers)
    scores = score_attention_heads(m, 2, calib)
    assert scores[1] == 0.0 and scores[0] > 0.0
    single = randomize(init_model(small_config(layer_pattern="A", n_att_heads=1), 0), 1)
    agg = collect_stats(single, calib, ["0.head_out"])["0.head_out"].aggregate()
    assert np.allclose(score_attention_heads(single, 0, calib), [np.linalg.norm(agg)], rtol=1e-14)


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------


def test_layer_kld_zero_block_and_positivity(model, calib):
    layers = list(model.layers)
    layers[3] = dataclasses.replace(layers[3], W_2=np.zeros_like(layers[3].W_2))
    m = dataclasses.replace(model, layers=layers)
    kld = layer_importance_kld(m, calib)
    assert kld[3] == 0.0
    assert np.all(kld[[0, 1, 2, 4, 5]] > 0.0)


def test_layer_kld_matches_direct_definition(model, calib):
    kld = layer_importance_kld(model, calib, n_samples=None)
    for layer in (0, 2):
        total, count = 0.0, 0
        for seq in calib:
            p = model.forward(seq)
            q = model.forward(seq, skip_layers=(layer,))
            lp = p - np.log(np.exp(p - p.max(-1, keepdims=True)).sum(-1, keepdims=True)) - p.max(-1, keepdims=True)
            lq = q - np.log(np.exp(q - q.max(-1, keepdims=True)).sum(-1, keepdims=True)) - q.max(-1, keepdims=True)
            total += float((np.exp(lp) * (lp - lq)).sum())
            count += len(seq)
        assert abs(kld[layer] - total / count) <= 1e-12


def test_layer_kld_subsampling_is_seeded(model, calib):
    a = layer_importance_kld(model, calib, n_samples=3, seed=1)
    b = layer_importance_kld(model, calib, n_samples=3, seed=1)
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# score set
# ---------------------------------------------------------------------------


def test_scoreset_round_trip(model, calib):
    scores = compute_scores(model, calib, ("mamba", "ffn", "emb", "flap", "att", "layer_kld"), kld_samples=None)
    report = scores.to_dict()
    assert len(report["layers"]["0"]["s_d"]) == model.config.m_d
    assert len(report["layers"]["0"]["f_h"]) == model.config.m_h
    back = ScoreSet.from_dict(report)
    assert back.to_json() == scores.to_json()
    csv_text = scores.layer_kld_csv(model.config.layer_pattern)
    assert csv_text.splitlines()[0] == "layer,kind,kld" and len(csv_text.splitlines()) == 7


def test_compute_scores_matches_individual_calls(model, calib):
    scores = compute_scores(model, calib, ("mamba", "ffn", "flap"))
    assert np.array_equal(scores.mamba_s[4], score_mamba(model, 4, calib)[0])
    assert np.array_equal(scores.ffn[5], score_ffn(model, 5, calib))
    assert np.array_equal(scores.flap[1], score_flap(model, 1, calib))
    with pytest.raises(ParameterError):
        compute_scores(model, calib, ("gradients",))


def test_scores_nonnegative(model, calib):
    scores = compute_scores(model, calib, ("mamba", "ffn", "emb", "flap", "att"))
    for group in (scores.mamba_s, scores.ffn, scores.flap, scores.att):
        for v in group.values():
            assert np.all(v >= 0) and np.all(np.isfinite(v))
    assert np.all(scores.emb >= 0)

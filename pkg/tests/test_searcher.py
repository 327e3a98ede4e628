from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math

import numpy as np
import pytest

import hybridprune.searcher as searcher
from hybridprune.data import markov_transitions, sample_markov
from hybridprune.distiller import DivergenceError, KDConfig
from hybridprune.importance import compute_scores
from hybridprune.model import init_model, param_count, token_cross_entropy
from hybridprune.pruner import apply_plan
from hybridprune.searcher import (
    CSV_COLUMNS,
    Candidate,
    enumerate_candidates,
    lightweight_kd_rank,
    macs_per_token,
    plan_for,
    report_csv,
    run_search,
    select_winner,
    zero_shot_rank,
)

from .conftest import randomize, small_config

GRID = dict(n_layers=[4, 6], d_e=[8, 16], d_ffn=[16, 32], m_h=[2, 4], m_d=[2, 4])


@pytest.fixture
def scores(model, calib):
    return compute_scores(model, calib, ("mamba", "ffn", "emb", "layer_kld"))


def drop_order(scores):
    return [int(i) for i in np.argsort(scores.layer_kld, kind="stable")]


def brute_force(parent, grid, budget, tol, order):
    out = []
    for point in itertools.product(*(grid[a] for a in searcher.AXES)):
        n_layers, d_e, d_ffn, m_h, m_d = point
        dropped = set(order[: parent.n_layers - n_layers])
        pattern = "".join(k for i, k in enumerate(parent.layer_pattern) if i not in dropped)
        cfg = small_config(layer_pattern=pattern, d_e=d_e, d_ffn=d_ffn, m_h=m_h, m_d=m_d,
                           embed_norm_dim=parent.d_e, mamba_norm_dim=parent.d_inner, att_head_dim=parent.att_head_dim)
        if abs(param_count(cfg) - budget) <= tol * budget:
            out.append((point, param_count(cfg)))
    return out


def test_enumeration_matches_brute_force(cfg, scores):
    budget = param_count(cfg) // 2
    for tol in (0.05, 0.2, 0.5):
        found = enumerate_candidates(cfg, GRID, budget, tol, drop_order(scores))
        assert [(c.axes, c.params) for c in found] == brute_force(cfg, GRID, budget, tol, drop_order(scores))
        assert len({c.axes for c in found}) == len(found)
        assert [c.index for c in found] == list(range(len(found)))


def test_single_point_and_empty_results(cfg):
    point = dict(d_e=[12], d_ffn=[16], m_h=[2], m_d=[4])
    target = param_count(searcher.candidate_config(cfg, 6, 12, 16, 2, 4))
    found = enumerate_candidates(cfg, point, target, 0.0)
    assert [c.axes for c in found] == [(6, 12, 16, 2, 4)] and found[0].params == target
    assert enumerate_candidates(cfg, point, target + 1, 0.0) == []
    with pytest.raises(ValueError):
        enumerate_candidates(cfg, dict(d_e=[]), target, 0.1)


def test_invalid_grid_points_are_skipped(cfg):
    found = enumerate_candidates(cfg, dict(m_h=[3, 4, 8], d_e=[16, 20]), param_count(cfg), 1.0)
    assert [c.axes for c in found] == [(6, 16, 32, 4, 4)]


def test_throughput_proxy(cfg):
    base = macs_per_token(cfg)
    fewer_heads = macs_per_token(cfg.replace(m_h=2))
    assert fewer_heads < base
    found = enumerate_candidates(cfg, dict(m_h=[2, 4]), param_count(cfg), 1.0)
    assert found[1].throughput_proxy == 1.0 and found[0].throughput_proxy > 1.0


# ---------------------------------------------------------------------------
# zero-shot ranking
# ---------------------------------------------------------------------------


def test_zero_shot_rank(model, calib, scores):
    cands = enumerate_candidates(model.config, GRID, param_count(model.config), 1.0, drop_order(scores))
    before = model.checksum()
    ranked = zero_shot_rank(model, cands, calib, scores)
    assert model.checksum() == before
    recomputed = sorted(
        ((token_cross_entropy(apply_plan(model, plan_for(c, model.config, scores)), calib), c.index) for c in cands)
    )
    assert [(c.zero_shot_loss, c.index) for c in ranked] == recomputed
    parent = next(c for c in ranked if c.axes == (6, 16, 32, 4, 4))
    assert parent.zero_shot_loss == token_cross_entropy(model, calib)
    assert [c.index for c in zero_shot_rank(model, cands, calib, scores, jobs=3)] == [c.index for c in ranked]


def test_uniform_model_loss_is_log_vocab(cfg, calib):
    m = init_model(cfg, 0, zeros=True)
    sc = compute_scores(m, calib, ("mamba", "ffn", "emb"))
    cands = enumerate_candidates(cfg, dict(d_ffn=[16, 32], m_h=[2, 4]), param_count(cfg), 1.0)
    for c in zero_shot_rank(m, cands, calib, sc):
        assert abs(c.zero_shot_loss - math.log(cfg.vocab)) <= 1e-12


# ---------------------------------------------------------------------------
# lightweight KD
# ---------------------------------------------------------------------------


@pytest.fixture
def corpus(cfg):
    return sample_markov(markov_transitions(cfg.vocab, 4, seed=0), 32, 32, seed=1)


KD = KDConfig(warmup_steps=2, total_steps=10, batch_size=4, seq_len=16)


def test_zero_budget_keeps_zero_shot_order(model, calib, scores, corpus):
    cands = enumerate_candidates(model.config, GRID, param_count(model.config), 1.0, drop_order(scores))
    ranked = zero_shot_rank(model, cands, calib, scores)[:5]
    kd = lightweight_kd_rank(model, ranked, scores, corpus, calib, 0, KD)
    assert [c.index for c in kd] == [c.index for c in ranked]


def test_parent_identical_candidate_stays_at_floor(model, scores, corpus):
    cand = enumerate_candidates(model.config, {}, param_count(model.config), 0.0)
    kd = lightweight_kd_rank(model, cand, scores, corpus, corpus, 20 * 4 * 16, KD)
    # FKLD against an exact copy has zero gradient up to rounding
    assert abs(kd[0].kd_loss - token_cross_entropy(model, corpus)) <= 1e-6


def test_diverging_candidate_ranked_last(model, calib, scores, corpus, monkeypatch):
    cands = zero_shot_rank(model, enumerate_candidates(model.config, GRID, param_count(model.config), 1.0,
                                                       drop_order(scores)), calib, scores)[:3]
    real = searcher.distill
    doomed = cands[0].axes

    def fake(student, teacher, data, cfg, **kw):
        if student.config.d_e == doomed[1] and student.config.n_layers == doomed[0] and \
                (student.config.d_ffn, student.config.m_h, student.config.m_d) == doomed[2:]:
            raise DivergenceError(1, math.nan, [])
        return real(student, teacher, data, cfg, **kw)

    monkeypatch.setattr(searcher, "distill", fake)
    kd = lightweight_kd_rank(model, cands, scores, corpus, calib, 10 * 4 * 16, KD)
    assert kd[-1].axes == doomed and kd[-1].failed and kd[-1].kd_loss == math.inf
    assert select_winner(kd).axes != doomed


def test_kd_reranking_changes_order_for_some_seed(corpus):
    grid = dict(n_layers=[4, 5, 6], d_e=[8, 12, 16], d_ffn=[16, 32], m_h=[2, 4], m_d=[2, 4])
    changed = []
    for seed in range(20):
        teacher = randomize(init_model(small_config(), seed), seed + 100)
        sc = compute_scores(teacher, corpus[:8], ("mamba", "ffn", "emb", "layer_kld"))
        res = run_search(teacher, sc, grid, param_count(teacher.config) // 2, corpus[:8], corpus, corpus[:8],
                         tolerance=0.1, top_k=4, kd_tokens=30 * 4 * 16, kd_config=KD)
        changed.append(res.notes[0].endswith("yes"))
        if changed[-1]:
            break
    assert any(changed)


# ---------------------------------------------------------------------------
# winner and report
# ---------------------------------------------------------------------------


def cand(loss, proxy, index=0, **kw):
    return Candidate(52, 3072, 12288, 112, 64, params=4, index=index, kd_loss=loss, throughput_proxy=proxy, **kw)


def test_select_winner_rules():
    only = cand(1.5, 1.0)
    assert select_winner([only]) is only
    first, second = cand(1.380, 1.00, 0), cand(1.380, 0.98, 1)
    assert select_winner([first, second]) is first
    assert select_winner([second, first]) is first
    faster_but_worse = cand(1.381, 2.0, 1)
    assert select_winner([first, faster_but_worse]) is first
    near_tie = cand(1.38005, 1.5, 1)
    assert select_winner([first, near_tie]) is near_tie
    with pytest.raises(ValueError):
        select_winner([])


def test_report_schema(model, calib, scores, corpus):
    res = run_search(model, scores, GRID, param_count(model.config) // 2, calib, corpus, calib,
                     tolerance=0.3, top_k=2, kd_tokens=5 * 4 * 16, kd_config=KD)
    text = report_csv(res.report())
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0].keys()) == CSV_COLUMNS == (
        "layers", "emb", "ffn", "heads", "head_channels", "params", "zero_shot_loss", "kd_loss", "throughput_proxy")
    assert len(rows) == len(res.candidates)
    assert all(r["kd_loss"] for r in rows[:2]) and not any(r["kd_loss"] for r in rows[2:])
    assert res.winner.axes == tuple(int(rows[0][k]) for k in ("layers", "emb", "ffn", "heads", "head_channels")) or \
        abs(res.winner.kd_loss - float(rows[0]["kd_loss"])) <= searcher.TIE_EPSILON
    assert apply_plan(model, res.plan).n_params() == res.winner.params


def test_search_with_no_candidates(model, scores, calib):
    res = run_search(model, scores, dict(d_e=[16]), 10, calib, calib, calib)
    assert res.winner is None and res.candidates == []

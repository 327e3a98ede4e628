"""scikit-learn style wrappers around the scoring, pruning, search and distillation steps.

``X`` is always calibration or training tokens: a ``(B, L)`` integer array or
a list of 1-D id arrays. Models are passed as constructor parameters so that
``get_params``/``set_params``/``clone`` behave as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .distiller import KDConfig, distill, fkld
from .importance import ScoreSet, compute_scores
from .model import HybridModel, check_tokens, iter_sequences, token_cross_entropy
from .numkit import UsageError
from .pruner import apply_plan, build_plan
from .searcher import run_search


def check_token_batches(X, vocab: int, min_length: int = 1) -> list[np.ndarray]:
    """Validate token input and return it as a list of 1-D int64 arrays."""
    if X is None:
        raise UsageError("no token data given")
    seqs = [check_tokens(s, vocab) for s in iter_sequences(X)]
    seqs = [s for s in seqs if len(s) >= min_length]
    if not seqs:
        raise UsageError(f"no sequence with at least {min_length} tokens")
    return seqs


def check_model(model) -> HybridModel:
    if not isinstance(model, HybridModel):
        raise TypeError(f"expected a HybridModel, got {type(model).__name__}")
    return model


class _ModelOutputMixin:
    """``predict`` returns per-sequence logits of ``model_``; ``score`` is minus cross-entropy."""

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [self.model_.forward(s) for s in check_token_batches(X, self.model_.config.vocab)]

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "model_")
        return -token_cross_entropy(self.model_, check_token_batches(X, self.model_.config.vocab, 2))


class ImportanceScorer(BaseEstimator):
    def __init__(self, model=None, metrics=("mamba", "ffn", "emb"), aggregation="mean_l2", kld_samples=256, seed=0):
        self.model = model
        self.metrics = metrics
        self.aggregation = aggregation
        self.kld_samples = kld_samples
        self.seed = seed

    def fit(self, X, y=None):
        model = check_model(self.model)
        seqs = check_token_batches(X, model.config.vocab)
        self.scores_ = compute_scores(model, seqs, self.metrics, self.aggregation,
                                      kld_samples=self.kld_samples, seed=self.seed)
        return self

    def transform(self, X=None) -> dict:
        """The fitted scores as the JSON-ready report dictionary."""
        check_is_fitted(self, "scores_")
        return self.scores_.to_dict()


class HybridPruner(_ModelOutputMixin, BaseEstimator):
    """Score on ``X`` (unless ``scores`` is given), build a plan for the targets, trim."""

    def __init__(self, model=None, n_layers=None, d_e=None, d_ffn=None, m_h=None, m_d=None, n_att_heads=None,
                 metric="l2", scores=None, kld_samples=256, seed=0):
        self.model = model
        self.n_layers = n_layers
        self.d_e = d_e
        self.d_ffn = d_ffn
        self.m_h = m_h
        self.m_d = m_d
        self.n_att_heads = n_att_heads
        self.metric = metric
        self.scores = scores
        self.kld_samples = kld_samples
        self.seed = seed

    def _needed_metrics(self) -> list[str]:
        needed = ["flap"] if self.metric == "flap" else ["mamba", "ffn", "att"]
        if self.d_e is not None:
            needed.append("emb")
        if self.n_layers is not None:
            needed.append("layer_kld")
        return needed

    def fit(self, X=None, y=None):
        model = check_model(self.model)
        if self.scores is not None:
            scores = self.scores if isinstance(self.scores, ScoreSet) else ScoreSet.from_dict(self.scores)
        else:
            seqs = check_token_batches(X, model.config.vocab)
            scores = compute_scores(model, seqs, self._needed_metrics(), kld_samples=self.kld_samples, seed=self.seed)
        targets = dict(n_layers=self.n_layers, d_e=self.d_e, d_ffn=self.d_ffn, m_h=self.m_h, m_d=self.m_d,
                       n_att_heads=self.n_att_heads)
        self.scores_ = scores
        self.plan_ = build_plan(model.config, scores, metric=self.metric, **targets)
        self.model_ = apply_plan(model, self.plan_)
        return self

    def transform(self, X=None) -> HybridModel:
        check_is_fitted(self, "model_")
        return self.model_


class ArchitectureSearch(_ModelOutputMixin, BaseEstimator):
    """Budgeted search; ``fit(X_calib, X_train=None, X_val=None)`` leaves the winner in ``model_``."""

    def __init__(self, model=None, grid=None, budget=None, tolerance=0.02, top_k=4, kd_tokens=0, kd_config=None,
                 metric="l2", scores=None, kld_samples=256, jobs=1, seed=0):
        self.model = model
        self.grid = grid
        self.budget = budget
        self.tolerance = tolerance
        self.top_k = top_k
        self.kd_tokens = kd_tokens
        self.kd_config = kd_config
        self.metric = metric
        self.scores = scores
        self.kld_samples = kld_samples
        self.jobs = jobs
        self.seed = seed

    def fit(self, X, y=None, X_train=None, X_val=None):
        model = check_model(self.model)
        vocab = model.config.vocab
        calib = check_token_batches(X, vocab, 2)
        train = check_token_batches(X_train, vocab, 2) if X_train is not None else calib
        val = check_token_batches(X_val, vocab, 2) if X_val is not None else calib
        scores = self.scores
        if scores is None:
            scores = compute_scores(model, calib, ("mamba", "ffn", "emb", "flap", "layer_kld"),
                                    kld_samples=self.kld_samples, seed=self.seed)
        budget = self.budget if self.budget is not None else model.n_params() // 2
        self.result_ = run_search(model, scores, self.grid or {}, budget, calib, train, val,
                                  tolerance=self.tolerance, top_k=self.top_k, kd_tokens=self.kd_tokens,
                                  kd_config=self.kd_config, metric=self.metric, jobs=self.jobs)
        if self.result_.winner is None:
            raise UsageError("no grid point falls inside the parameter budget")
        self.scores_ = scores
        self.winner_ = self.result_.winner
        self.plan_ = self.result_.plan
        self.model_ = apply_plan(model, self.plan_)
        return self


class Distiller(_ModelOutputMixin, BaseEstimator):
    """Distil ``student`` towards ``teacher`` on ``X``; ``kd_config`` defaults to ``KDConfig()``."""

    def __init__(self, student=None, teacher=None, kd_config=None, lr_scale=1.0):
        self.student = student
        self.teacher = teacher
        self.kd_config = kd_config
        self.lr_scale = lr_scale

    def fit(self, X, y=None):
        student, teacher = check_model(self.student), check_model(self.teacher)
        cfg = self.kd_config or KDConfig()
        seqs = check_token_batches(X, teacher.config.vocab, cfg.seq_len)
        self.model_, self.trace_ = distill(student, teacher, seqs, cfg, lr_scale=self.lr_scale)
        return self

    def fkld(self, X) -> float:
        check_is_fitted(self, "model_")
        return fkld(self.teacher, self.model_, check_token_batches(X, self.model_.config.vocab))

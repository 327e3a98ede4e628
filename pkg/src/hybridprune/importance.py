"""Forward-only importance estimators.

Activation-based scores aggregate each activation by its mean over the
sequence, then by the L2 norm over sequences (the batch axis). Calibration
data is consumed one sequence at a time, so a stream split across several
calls produces bit-identical scores to a single call.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import ATTENTION, FFN, MAMBA, HybridModel, iter_sequences, model_forward
from .numkit import ParameterError, UsageError, log_softmax_temp_np

MEAN_L2 = "mean_l2"
RAW_SUM = "sum"


class ActivationStats:
    """Mergeable aggregates of one activation site (features on the last axis).

    Keeps one row per sequence for the L2/sum aggregates so that any split
    of the stream reduces in the same order, plus Welford moments over all
    positions for variance.
    """

    def __init__(self, n_features: int):
        self.n_features = int(n_features)
        self._seq_means: list[np.ndarray] = []
        self._seq_sums: list[np.ndarray] = []
        self.count = 0
        self.mean = np.zeros(self.n_features)
        self.m2 = np.zeros(self.n_features)

    @property
    def n_sequences(self) -> int:
        return len(self._seq_means)

    def update(self, act: np.ndarray) -> "ActivationStats":
        """Add one sequence of activations, shape (L, ..., features)."""
        act = np.asarray(act, dtype=np.float64)
        rows = act.reshape(act.shape[0], -1)
        if rows.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {rows.shape[1]}")
        length = rows.shape[0]
        total = np.zeros(self.n_features)
        for row in rows:
            total += row
        self._seq_sums.append(total)
        self._seq_means.append(total / length)
        # Chan et al. pairwise merge of this sequence's moments
        bmean = total / length
        dev = rows - bmean
        bm2 = np.zeros(self.n_features)
        for row in dev:
            bm2 += row * row
        self._merge_moments(length, bmean, bm2)
        return self

    def _merge_moments(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        n_a = self.count
        n = n_a + n_b
        if n == 0:
            return
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta * delta * (n_a * n_b / n)
        self.count = n

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        """Append ``other``'s stream after this one (in place)."""
        if other.n_features != self.n_features:
            raise ValueError("cannot merge stats with different feature counts")
        self._seq_means.extend(other._seq_means)
        self._seq_sums.extend(other._seq_sums)
        self._merge_moments(other.count, other.mean, other.m2)
        return self

    def aggregate(self, aggregation: str = MEAN_L2) -> np.ndarray:
        if not self._seq_means:
            raise UsageError("no calibration sequences were observed")
        acc = np.zeros(self.n_features)
        if aggregation == MEAN_L2:
            for m in self._seq_means:
                acc += m * m
            return np.sqrt(acc)
        if aggregation == RAW_SUM:
            for s in self._seq_sums:
                acc += s
            return acc
        raise ParameterError(f"unknown aggregation {aggregation!r}")

    def variance(self) -> np.ndarray:
        """Sample variance (N-1 denominator) over every observed position."""
        if self.count < 2:
            raise UsageError("variance needs at least two samples")
        return self.m2 / (self.count - 1)


def _site_sizes(model: HybridModel) -> dict[str, int]:
    cfg = model.config
    sizes = {"final.norm_out": cfg.d_e}
    for i, layer in enumerate(model.layers):
        p = f"{i}."
        sizes[p + "norm_out"] = cfg.d_e
        if layer.kind == MAMBA:
            di = layer.m_h * layer.m_d
            sizes.update({p + "x_proj": di, p + "z_proj": di, p + "out_proj_in": di})
        elif layer.kind == FFN:
            n = np.shape(getattr(layer.W_1, "data", layer.W_1))[0]
            sizes.update({p + "pre_act": n, p + "hidden": n})
        else:
            sizes[p + "head_out"] = layer.n_heads * layer.head_dim
    return sizes


def collect_stats(
    model: HybridModel, calib, sites: Sequence[str] | None = None, stats: dict | None = None
) -> dict[str, ActivationStats]:
    """Run the model over each calibration sequence and accumulate site stats."""
    sizes = _site_sizes(model)
    wanted = list(sizes) if sites is None else list(sites)
    unknown = [s for s in wanted if s not in sizes]
    if unknown:
        raise UsageError(f"unknown activation sites: {unknown}")
    stats = {} if stats is None else stats
    for s in wanted:
        stats.setdefault(s, ActivationStats(sizes[s]))
    seen = 0
    for seq in iter_sequences(calib):
        trace: dict = {}
        model_forward(model, seq, trace=trace)
        for s in wanted:
            stats[s].update(trace[s])
        seen += 1
    if seen == 0 and all(st.n_sequences == 0 for st in stats.values()):
        raise UsageError("calibration set is empty")
    return stats


def _layer(model: HybridModel, layer: int, kind: str):
    w = model.layers[layer]
    if w.kind != kind:
        raise UsageError(f"layer {layer} is {w.kind!r}, expected {kind!r}")
    return w


# ---------------------------------------------------------------------------
# Mamba heads and head channels
# ---------------------------------------------------------------------------


def channel_scores(s: np.ndarray) -> np.ndarray:
    """L2 norm of each head-channel column across heads."""
    s = np.asarray(s, dtype=np.float64)
    return np.sqrt((s * s).sum(axis=0))


def head_scores(s: np.ndarray, channels: Sequence[int]) -> np.ndarray:
    """L2 norm of each head's row restricted to the kept channels."""
    s = np.asarray(s, dtype=np.float64)
    idx = np.asarray(channels, dtype=np.int64)
    if idx.size == 0:
        raise ParameterError("channel set must be non-empty")
    sub = s[:, idx]
    return np.sqrt((sub * sub).sum(axis=1))


score_heads = head_scores


def select_channels(s_d: np.ndarray, k_d: int) -> list[int]:
    """Indices of the ``k_d`` largest channel scores, ascending; ties keep the lower index."""
    s_d = np.asarray(s_d, dtype=np.float64)
    if not 1 <= k_d <= s_d.size:
        raise ParameterError(f"k_d={k_d} outside [1, {s_d.size}]")
    order = np.argsort(-s_d, kind="stable")
    return sorted(int(i) for i in order[:k_d])


def score_mamba(
    model: HybridModel, layer: int, calib, aggregation: str = MEAN_L2, stats: dict | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated ``LN(X) @ W_x`` activations as an (m_h, m_d) matrix, plus channel scores."""
    w = _layer(model, layer, MAMBA)
    site = f"{layer}.x_proj"
    stats = stats if stats is not None else collect_stats(model, calib, [site])
    s = stats[site].aggregate(aggregation).reshape(w.m_h, w.m_d)
    return s, channel_scores(s)


# ---------------------------------------------------------------------------
# FFN, embedding, attention
# ---------------------------------------------------------------------------


def score_ffn(model: HybridModel, layer: int, calib, aggregation: str = MEAN_L2, stats: dict | None = None) -> np.ndarray:
    """Per-neuron aggregate of the pre-activation ``LN(X) @ W_1[i]``."""
    _layer(model, layer, FFN)
    site = f"{layer}.pre_act"
    stats = stats if stats is not None else collect_stats(model, calib, [site])
    return stats[site].aggregate(aggregation)


def embedding_sites(model: HybridModel, include_final: bool = False) -> list[str]:
    """Normalized-input sites feeding block projections (optionally the final norm)."""
    sites = [f"{i}.norm_out" for i in range(len(model.layers))]
    if include_final:
        sites.append("final.norm_out")
    return sites


def score_embedding(
    model: HybridModel,
    calib,
    sites: Sequence[str] | None = None,
    aggregation: str = MEAN_L2,
    stats: dict | None = None,
) -> np.ndarray:
    """Sum over sites of the per-channel aggregate of ``LN(X)_i``."""
    sites = embedding_sites(model) if sites is None else list(sites)
    stats = stats if stats is not None else collect_stats(model, calib, sites)
    total = np.zeros(model.config.d_e)
    for site in sites:
        total += stats[site].aggregate(aggregation)
    return total


def score_attention_heads(
    model: HybridModel, layer: int, calib, aggregation: str = MEAN_L2, stats: dict | None = None
) -> np.ndarray:
    w = _layer(model, layer, ATTENTION)
    site = f"{layer}.head_out"
    stats = stats if stats is not None else collect_stats(model, calib, [site])
    per_dim = stats[site].aggregate(aggregation).reshape(w.n_heads, w.head_dim)
    return np.sqrt((per_dim * per_dim).sum(axis=1))


# ---------------------------------------------------------------------------
# FLAP
# ---------------------------------------------------------------------------


def flap_from_stats(weight_sq_norms: np.ndarray, stats: ActivationStats) -> np.ndarray:
    return np.asarray(weight_sq_norms) * stats.variance()


def score_flap(model: HybridModel, layer: int, calib, stats: dict | None = None) -> np.ndarray:
    """``||W_j||^2 * Var(X_j)`` for each input feature ``j`` of the layer's output projection."""
    w = model.layers[layer]
    if w.kind == MAMBA:
        site, W = f"{layer}.out_proj_in", np.asarray(getattr(w.W_O, "data", w.W_O))
        sq = (W * W).sum(axis=1)
    elif w.kind == FFN:
        site, W = f"{layer}.hidden", np.asarray(getattr(w.W_2, "data", w.W_2))
        sq = (W * W).sum(axis=0)
    else:
        site, W = f"{layer}.head_out", np.asarray(getattr(w.W_o, "data", w.W_o))
        sq = (W * W).sum(axis=1)
    stats = stats if stats is not None else collect_stats(model, calib, [site])
    return flap_from_stats(sq, stats[site])


def flap_head_matrix(S: np.ndarray, m_h: int, m_d: int) -> np.ndarray:
    """Map FLAP column scores onto the head x channel grid used by the ranking.

    ``sqrt`` makes the L2 reductions of the ranking sum FLAP scores.
    """
    return np.sqrt(np.asarray(S, dtype=np.float64).reshape(m_h, m_d))


def flap_attention_heads(S: np.ndarray, n_heads: int) -> np.ndarray:
    return np.asarray(S).reshape(n_heads, -1).sum(axis=1)


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Per-position KL(p || q) of tempered softmaxes."""
    lp = log_softmax_temp_np(p_logits, tau)
    lq = log_softmax_temp_np(q_logits, tau)
    return (np.exp(lp) * (lp - lq)).sum(axis=-1)


def layer_importance_kld(
    model: HybridModel, calib, n_samples: int | None = 256, seed: int = 0, tau: float = 1.0
) -> np.ndarray:
    """Mean KL(p_full || p_without_layer) over samples and positions, per layer."""
    seqs = list(iter_sequences(calib))
    if not seqs:
        raise UsageError("calibration set is empty")
    if n_samples is not None and len(seqs) > n_samples:
        pick = np.sort(np.random.default_rng(seed).choice(len(seqs), size=n_samples, replace=False))
        seqs = [seqs[i] for i in pick]
    n_layers = len(model.layers)
    totals = np.zeros(n_layers)
    positions = 0
    for seq in seqs:
        full = model.forward(seq)
        positions += len(seq)
        for layer in range(n_layers):
            ablated = model.forward(seq, skip_layers=(layer,))
            totals[layer] += float(kl_divergence(full, ablated, tau).sum())
    return np.maximum(totals / positions, 0.0)


# ---------------------------------------------------------------------------
# score set
# ---------------------------------------------------------------------------

METRICS = ("mamba", "ffn", "emb", "flap", "att", "layer_kld")


@dataclass
class ScoreSet:
    mamba_s: dict[int, np.ndarray] = field(default_factory=dict)       # (m_h, m_d)
    ffn: dict[int, np.ndarray] = field(default_factory=dict)           # d_ffn
    emb: np.ndarray | None = None                                      # d_e
    flap: dict[int, np.ndarray] = field(default_factory=dict)          # W_O / W_2 / W_o input columns
    att: dict[int, np.ndarray] = field(default_factory=dict)           # n_heads
    layer_kld: np.ndarray | None = None                                # n_layers

    def mamba_channel_scores(self, layer: int) -> np.ndarray:
        return channel_scores(self.mamba_s[layer])

    def to_dict(self) -> dict:
        layers: dict[str, dict] = {}

        def put(i, key, val):
            layers.setdefault(str(i), {})[key] = np.asarray(val).tolist()

        for i, s in self.mamba_s.items():
            put(i, "mamba_s", s)
            put(i, "s_d", channel_scores(s))
            put(i, "f_h", head_scores(s, range(s.shape[1])))
        for i, v in self.ffn.items():
            put(i, "ffn", v)
        for i, v in self.flap.items():
            put(i, "flap", v)
        for i, v in self.att.items():
            put(i, "att", v)
        out: dict = {"layers": dict(sorted(layers.items(), key=lambda kv: int(kv[0])))}
        if self.emb is not None:
            out["emb"] = self.emb.tolist()
        if self.layer_kld is not None:
            out["layer_kld"] = self.layer_kld.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreSet":
        out = cls()
        for key, entry in data.get("layers", {}).items():
            i = int(key)
            if "mamba_s" in entry:
                out.mamba_s[i] = np.asarray(entry["mamba_s"], dtype=np.float64)
            for name in ("ffn", "flap", "att"):
                if name in entry:
                    getattr(out, name)[i] = np.asarray(entry[name], dtype=np.float64)
        if data.get("emb") is not None:
            out.emb = np.asarray(data["emb"], dtype=np.float64)
        if data.get("layer_kld") is not None:
            out.layer_kld = np.asarray(data["layer_kld"], dtype=np.float64)
        return out

    def layer_kld_csv(self, pattern: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "kind", "kld"])
        for i, v in enumerate(self.layer_kld if self.layer_kld is not None else []):
            writer.writerow([i, pattern[i] if pattern else "", repr(float(v))])
        return buf.getvalue()


def compute_scores(
    model: HybridModel,
    calib,
    metrics: Iterable[str] = ("mamba", "ffn", "emb"),
    aggregation: str = MEAN_L2,
    emb_sites: Sequence[str] | None = None,
    kld_samples: int | None = 256,
    seed: int = 0,
) -> ScoreSet:
    """All requested metrics from a single pass over the calibration data."""
    metrics = list(metrics)
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ParameterError(f"unknown metrics {bad}; choose from {METRICS}")
    seqs = list(iter_sequences(calib))
    if not seqs:
        raise UsageError("calibration set is empty")
    stats = collect_stats(model, seqs)
    out = ScoreSet()
    for i, layer in enumerate(model.layers):
        if layer.kind == MAMBA and "mamba" in metrics:
            out.mamba_s[i] = score_mamba(model, i, None, aggregation, stats)[0]
        if layer.kind == FFN and "ffn" in metrics:
            out.ffn[i] = score_ffn(model, i, None, aggregation, stats)
        if layer.kind == ATTENTION and "att" in metrics:
            out.att[i] = score_attention_heads(model, i, None, aggregation, stats)
        if "flap" in metrics:
            out.flap[i] = score_flap(model, i, None, stats)
    if "emb" in metrics:
        out.emb = score_embedding(model, None, emb_sites, aggregation, stats)
    if "layer_kld" in metrics:
        out.layer_kld = layer_importance_kld(model, seqs, kld_samples, seed)
    return out

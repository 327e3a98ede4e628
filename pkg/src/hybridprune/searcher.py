"""Architecture search under a parameter budget.

Candidates are grid points over (layers, embedding, FFN, Mamba heads, Mamba
head channels). Every candidate is pruned from the same parent scores; the
search ranks them by zero-shot loss, re-ranks the best few after a short
distillation, and breaks near-ties by an analytic throughput proxy.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .distiller import DivergenceError, KDConfig, distill
from .importance import ScoreSet
from .model import ATTENTION, FFN, MAMBA, HybridModel, ModelConfig, param_count, token_cross_entropy
from .pruner import PlanError, PrunePlan, apply_plan, build_plan, kept_layers_for

AXES = ("n_layers", "d_e", "d_ffn", "m_h", "m_d")
CSV_COLUMNS = ("layers", "emb", "ffn", "heads", "head_channels", "params", "zero_shot_loss", "kd_loss", "throughput_proxy")
TIE_EPSILON = 1e-4


@dataclass
class Candidate:
    n_layers: int
    d_e: int
    d_ffn: int
    m_h: int
    m_d: int
    params: int
    index: int = 0
    zero_shot_loss: float | None = None
    kd_loss: float | None = None
    throughput_proxy: float | None = None
    failed: bool = False

    @property
    def axes(self) -> tuple[int, ...]:
        return (self.n_layers, self.d_e, self.d_ffn, self.m_h, self.m_d)

    def targets(self) -> dict[str, int]:
        return dict(zip(AXES, self.axes))


def macs_per_token(config: ModelConfig, seq_len: int = 1024) -> float:
    """Multiply-accumulates per generated token; attention context taken as ``seq_len / 2``."""
    d_e, di, gs, mh = config.d_e, config.d_inner, config.g * config.d_s, config.m_h
    inner = config.n_att_heads * (config.att_head_dim or 0)
    mamba = d_e * (2 * di + 2 * gs + mh) + di * d_e + config.conv_k * (di + 2 * gs) + 2 * di * config.d_s
    attention = 4 * d_e * inner + seq_len * inner  # QK^T and PV over seq_len/2 positions each
    ffn = 2 * d_e * config.d_ffn
    cost = {MAMBA: mamba, ATTENTION: attention, FFN: ffn}
    return float(sum(cost[k] for k in config.layer_pattern) + d_e * config.vocab)


def candidate_config(
    parent: ModelConfig, n_layers: int, d_e: int, d_ffn: int, m_h: int, m_d: int, drop_order: Sequence[int] | None = None
) -> ModelConfig:
    if n_layers < parent.n_layers:
        if drop_order is None:
            raise PlanError("depth candidates need a layer drop order (layer_kld scores)")
        kept = kept_layers_for(parent, n_layers, drop_order)
    else:
        kept = list(range(parent.n_layers))
    return parent.replace(
        layer_pattern=tuple(parent.layer_pattern[i] for i in kept), d_e=d_e, d_ffn=d_ffn, m_h=m_h, m_d=m_d
    )


def _valid_point(parent: ModelConfig, point: tuple[int, ...]) -> bool:
    n_layers, d_e, d_ffn, m_h, m_d = point
    limits = (parent.n_layers, parent.d_e, parent.d_ffn, parent.m_h, parent.m_d)
    if any(v < 1 or v > lim for v, lim in zip(point, limits)):
        return False
    return m_h % parent.g == 0


def enumerate_candidates(
    parent: ModelConfig,
    grid: Mapping[str, Sequence[int]],
    budget: int,
    tolerance: float = 0.02,
    drop_order: Sequence[int] | None = None,
    seq_len: int = 1024,
) -> list[Candidate]:
    """Exact cross product in lexicographic axis order, filtered by the budget band.

    Missing axes default to the parent's value. Points that exceed the parent
    or break group divisibility are skipped.
    """
    axes = []
    for name in AXES:
        values = grid.get(name, [getattr(parent, name)])
        if len(values) == 0:
            raise ValueError(f"grid axis {name!r} is empty")
        axes.append(sorted({int(v) for v in values}))
    base = macs_per_token(parent, seq_len)
    out: list[Candidate] = []
    for point in itertools.product(*axes):
        if not _valid_point(parent, point):
            continue
        cfg = candidate_config(parent, *point, drop_order=drop_order)
        params = param_count(cfg)
        if abs(params - budget) <= tolerance * budget:
            out.append(
                Candidate(*point, params=params, index=len(out), throughput_proxy=base / macs_per_token(cfg, seq_len))
            )
    return out


def plan_for(candidate: Candidate, parent: ModelConfig, scores: ScoreSet, metric: str = "l2") -> PrunePlan:
    return build_plan(parent, scores, metric=metric, **candidate.targets())


def _map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))  # results keep input order


def zero_shot_rank(
    model: HybridModel,
    candidates: Sequence[Candidate],
    calib,
    scores: ScoreSet,
    metric: str = "l2",
    jobs: int = 1,
) -> list[Candidate]:
    """Prune each candidate (no training), score mean token cross-entropy, sort ascending."""
    calib = list(calib) if not isinstance(calib, np.ndarray) else calib

    def run(c: Candidate) -> float:
        pruned = apply_plan(model, plan_for(c, model.config, scores, metric))
        return token_cross_entropy(pruned, calib)

    losses = _map(run, list(candidates), jobs)
    scored = [dataclasses.replace(c, zero_shot_loss=loss) for c, loss in zip(candidates, losses)]
    return sorted(scored, key=lambda c: (c.zero_shot_loss, c.index))


def kd_steps_for(tokens: int, cfg: KDConfig) -> int:
    return int(tokens) // (cfg.batch_size * cfg.seq_len)


def lightweight_kd_rank(
    teacher: HybridModel,
    candidates: Sequence[Candidate],
    scores: ScoreSet,
    train_data,
    val_data,
    kd_tokens: int,
    kd_config: KDConfig,
    metric: str = "l2",
    jobs: int = 1,
) -> list[Candidate]:
    """Distil every candidate with the same schedule and data order, re-rank by validation loss.

    With a zero token budget no training runs and candidates keep their
    zero-shot losses, so the order is unchanged.
    """
    steps = kd_steps_for(kd_tokens, kd_config)
    if steps == 0:
        out = [dataclasses.replace(c, kd_loss=c.zero_shot_loss) for c in candidates]
        return sorted(out, key=lambda c: (_loss_key(c.kd_loss), c.index))
    cfg = dataclasses.replace(kd_config, total_steps=steps, warmup_steps=min(kd_config.warmup_steps, steps))

    def run(c: Candidate) -> tuple[float, bool]:
        student = apply_plan(teacher, plan_for(c, teacher.config, scores, metric))
        try:
            trained, _ = distill(student, teacher, train_data, cfg)
        except DivergenceError:
            return math.inf, True
        loss = token_cross_entropy(trained, val_data)
        return (loss, False) if math.isfinite(loss) else (math.inf, True)

    results = _map(run, list(candidates), jobs)
    out = [dataclasses.replace(c, kd_loss=loss, failed=failed) for c, (loss, failed) in zip(candidates, results)]
    return sorted(out, key=lambda c: (c.failed, _loss_key(c.kd_loss), c.index))


def _loss_key(v: float | None) -> float:
    return math.inf if v is None else v


def select_winner(ranked: Sequence[Candidate], epsilon: float = TIE_EPSILON) -> Candidate:
    """Lowest post-KD loss; losses within ``epsilon`` of it go to the highest throughput proxy."""
    if not ranked:
        raise ValueError("no candidates to choose from")
    pool = [c for c in ranked if not c.failed] or list(ranked)
    loss = lambda c: _loss_key(c.kd_loss if c.kd_loss is not None else c.zero_shot_loss)
    best = min(loss(c) for c in pool)
    tied = [c for c in pool if loss(c) - best <= epsilon]
    return max(tied, key=lambda c: (c.throughput_proxy or 0.0, -ranked.index(c)))


def report_csv(candidates: Sequence[Candidate]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    fmt = lambda v: "" if v is None else repr(float(v))
    for c in candidates:
        writer.writerow([c.n_layers, c.d_e, c.d_ffn, c.m_h, c.m_d, c.params,
                         fmt(c.zero_shot_loss), fmt(c.kd_loss), fmt(c.throughput_proxy)])
    return buf.getvalue()


@dataclass
class SearchResult:
    candidates: list[Candidate]
    zero_shot: list[Candidate]
    kd_ranked: list[Candidate]
    winner: Candidate | None
    plan: PrunePlan | None
    notes: list[str] = field(default_factory=list)

    def report(self) -> list[Candidate]:
        """Every candidate once: distilled ones in post-KD order, then the rest in zero-shot order."""
        seen = {c.index for c in self.kd_ranked}
        return list(self.kd_ranked) + [c for c in self.zero_shot if c.index not in seen]


def run_search(
    teacher: HybridModel,
    scores: ScoreSet,
    grid: Mapping[str, Sequence[int]],
    budget: int,
    calib,
    train_data,
    val_data,
    *,
    tolerance: float = 0.02,
    top_k: int = 4,
    kd_tokens: int = 0,
    kd_config: KDConfig | None = None,
    metric: str = "l2",
    jobs: int = 1,
    seq_len: int = 1024,
) -> SearchResult:
    drop = None
    if scores.layer_kld is not None:
        drop = [int(i) for i in np.argsort(scores.layer_kld, kind="stable")]
    cands = enumerate_candidates(teacher.config, grid, budget, tolerance, drop, seq_len)
    if not cands:
        return SearchResult([], [], [], None, None, ["no grid point falls inside the parameter budget"])
    ranked = zero_shot_rank(teacher, cands, calib, scores, metric, jobs)
    top = ranked[: max(1, min(top_k, len(ranked)))]
    kd_ranked = lightweight_kd_rank(teacher, top, scores, train_data, val_data, kd_tokens,
                                    kd_config or KDConfig(), metric, jobs)
    winner = select_winner(kd_ranked)
    changed = [c.index for c in kd_ranked] != [c.index for c in top]
    notes = [f"kd re-ranking changed the top-{len(top)} order: {'yes' if changed else 'no'}"]
    return SearchResult(cands, ranked, kd_ranked, winner, plan_for(winner, teacher.config, scores, metric), notes)

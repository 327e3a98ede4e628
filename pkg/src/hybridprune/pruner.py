"""Group-constrained ranking and physical trimming.

Mamba heads in group ``k`` occupy indices ``k*H/G .. (k+1)*H/G - 1`` and share
one B/C block, so a kept head set is only valid when every group keeps the
same number of its own heads. Trimmed layers store kept heads and channels in
ascending original order; within-group order carries no meaning for the
layer's output.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .importance import (
    ScoreSet,
    channel_scores,
    flap_attention_heads,
    flap_head_matrix,
    head_scores,
    select_channels,
)
from .model import (
    ATTENTION,
    FFN,
    MAMBA,
    AttentionLayerWeights,
    FFNLayerWeights,
    HybridModel,
    MambaLayerWeights,
    ModelConfig,
    _arr,
)
from .numkit import ParameterError


class PlanError(ValueError):
    """A prune plan is inconsistent with itself or with the model."""


def rank_group_constrained(f_h: Sequence[float], n_groups: int, k_g: int) -> list[int]:
    """Per group: sort heads by descending score (ties to the lower index),
    keep the first ``k_g``; concatenate in group order."""
    f = np.asarray(f_h, dtype=np.float64)
    m_h = f.size
    if n_groups < 1 or m_h % n_groups:
        raise ParameterError(f"{m_h} heads cannot be split into {n_groups} groups")
    per = m_h // n_groups
    if not 1 <= k_g <= per:
        raise ParameterError(f"k_g={k_g} outside [1, {per}]")
    ranking: list[int] = []
    for grp in range(n_groups):
        members = np.arange(grp * per, (grp + 1) * per)
        order = members[np.argsort(-f[members], kind="stable")]
        ranking.extend(int(h) for h in order[:k_g])
    return ranking


def top_k_indices(scores: Sequence[float], k: int) -> list[int]:
    """Ascending indices of the ``k`` largest scores (ties keep lower indices)."""
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= s.size:
        raise ParameterError(f"k={k} outside [1, {s.size}]")
    return sorted(int(i) for i in np.argsort(-s, kind="stable")[:k])


def _check_index_set(idx: Sequence[int], n: int, what: str) -> np.ndarray:
    arr = np.asarray(list(idx), dtype=np.int64)
    if arr.size == 0:
        raise PlanError(f"{what}: keep-set is empty")
    if arr.min() < 0 or arr.max() >= n:
        raise PlanError(f"{what}: indices must lie in [0, {n})")
    if np.unique(arr).size != arr.size:
        raise PlanError(f"{what}: duplicate indices")
    return arr


def check_group_constraint(heads: Sequence[int], m_h: int, n_groups: int) -> np.ndarray:
    """Validate a kept-head set; returns it sorted ascending."""
    arr = _check_index_set(heads, m_h, "mamba heads")
    per = m_h // n_groups
    counts = np.bincount(arr // per, minlength=n_groups)
    if np.any(counts != counts[0]) or counts[0] == 0:
        raise PlanError(f"every group must keep the same non-zero number of heads, got {counts.tolist()}")
    return np.sort(arr)


# ---------------------------------------------------------------------------
# trims
# ---------------------------------------------------------------------------


def trim_mamba(w: MambaLayerWeights, heads: Sequence[int], channels: Sequence[int]) -> MambaLayerWeights:
    m_h, m_d = w.m_h, w.m_d
    kept_h = check_group_constraint(heads, m_h, w.g)
    kept_d = np.sort(_check_index_set(channels, m_d, "mamba channels"))
    flat = (kept_h[:, None] * m_d + kept_d[None, :]).reshape(-1)
    a = lambda v: np.asarray(_arr(v))
    return dataclasses.replace(
        w,
        W_z=a(w.W_z)[:, flat],
        W_x=a(w.W_x)[:, flat],
        W_dt=a(w.W_dt)[:, kept_h],
        dt_bias=a(w.dt_bias)[kept_h],
        A_log=a(w.A_log)[kept_h],
        D=a(w.D)[kept_h],
        conv_x_w=a(w.conv_x_w)[:, flat],
        conv_x_b=a(w.conv_x_b)[flat],
        gate_norm=a(w.gate_norm)[flat],
        W_O=a(w.W_O)[flat, :],
    )


def trim_ffn(w: FFNLayerWeights, neurons: Sequence[int]) -> FFNLayerWeights:
    n = np.asarray(_arr(w.W_1)).shape[0]
    kept = np.sort(_check_index_set(neurons, n, "ffn neurons"))
    return dataclasses.replace(w, W_1=np.asarray(_arr(w.W_1))[kept, :], W_2=np.asarray(_arr(w.W_2))[:, kept])


def trim_attention_heads(w: AttentionLayerWeights, heads: Sequence[int]) -> AttentionLayerWeights:
    kept = np.sort(_check_index_set(heads, w.n_heads, "attention heads"))
    hd = w.head_dim
    flat = (kept[:, None] * hd + np.arange(hd)[None, :]).reshape(-1)
    a = lambda v: np.asarray(_arr(v))
    return dataclasses.replace(
        w,
        W_q=a(w.W_q)[:, flat],
        W_k=a(w.W_k)[:, flat],
        W_v=a(w.W_v)[:, flat],
        W_o=a(w.W_o)[flat, :],
        n_heads=int(kept.size),
    )


def _trim_layer_embedding(layer, kept: np.ndarray):
    a = lambda v: np.asarray(_arr(v))
    if layer.kind == MAMBA:
        return dataclasses.replace(
            layer,
            norm=a(layer.norm)[kept],
            W_z=a(layer.W_z)[kept, :],
            W_x=a(layer.W_x)[kept, :],
            W_B=a(layer.W_B)[kept, :],
            W_C=a(layer.W_C)[kept, :],
            W_dt=a(layer.W_dt)[kept, :],
            W_O=a(layer.W_O)[:, kept],
        )
    if layer.kind == ATTENTION:
        return dataclasses.replace(
            layer,
            norm=a(layer.norm)[kept],
            W_q=a(layer.W_q)[kept, :],
            W_k=a(layer.W_k)[kept, :],
            W_v=a(layer.W_v)[kept, :],
            W_o=a(layer.W_o)[:, kept],
        )
    return dataclasses.replace(layer, norm=a(layer.norm)[kept], W_1=a(layer.W_1)[:, kept], W_2=a(layer.W_2)[kept, :])


def _rebuild(model: HybridModel, layers: list, **config_changes) -> HybridModel:
    config = model.config.replace(**config_changes) if config_changes else model.config
    out = HybridModel(config, model.embed, layers, model.final_norm, model.unembed)
    _check_uniform(out)
    return out


def _check_uniform(model: HybridModel) -> None:
    cfg = model.config
    for i, layer in enumerate(model.layers):
        if layer.kind != cfg.layer_pattern[i]:
            raise PlanError(f"layer {i} is {layer.kind!r} but the config says {cfg.layer_pattern[i]!r}")
        if layer.kind == MAMBA and (layer.m_h, layer.m_d) != (cfg.m_h, cfg.m_d):
            raise PlanError(f"mamba layer {i} has (m_h, m_d)=({layer.m_h}, {layer.m_d}), config ({cfg.m_h}, {cfg.m_d})")
        if layer.kind == FFN and np.shape(_arr(layer.W_1))[0] != cfg.d_ffn:
            raise PlanError(f"ffn layer {i} width differs from config d_ffn={cfg.d_ffn}")
        if layer.kind == ATTENTION and layer.n_heads != cfg.n_att_heads:
            raise PlanError(f"attention layer {i} has {layer.n_heads} heads, config {cfg.n_att_heads}")


def trim_embedding(model: HybridModel, channels: Sequence[int]) -> HybridModel:
    kept = np.sort(_check_index_set(channels, model.config.d_e, "embedding channels"))
    layers = [_trim_layer_embedding(layer, kept) for layer in model.layers]
    config = model.config.replace(d_e=int(kept.size))
    return HybridModel(
        config,
        np.asarray(_arr(model.embed))[:, kept],
        layers,
        np.asarray(_arr(model.final_norm))[kept],
        np.asarray(_arr(model.unembed))[kept, :],
    )


def trim_depth(model: HybridModel, kept_layers: Sequence[int]) -> HybridModel:
    kept = _check_index_set(kept_layers, len(model.layers), "layers")
    if np.any(np.diff(kept) <= 0):
        raise PlanError("kept layers must be listed in increasing order")
    pattern = tuple(model.config.layer_pattern[i] for i in kept)
    return _rebuild(model, [model.layers[i] for i in kept], layer_pattern=pattern)


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


def _int_keys(d: Mapping) -> dict[int, list[int]]:
    return {int(k): [int(x) for x in v] for k, v in d.items()}


@dataclass
class PrunePlan:
    """Explicit keep-sets, keyed by layer index in the parent model."""

    kept_layers: list[int] | None = None
    emb_channels: list[int] | None = None
    mamba_heads: dict[int, list[int]] = field(default_factory=dict)
    mamba_channels: dict[int, list[int]] = field(default_factory=dict)
    ffn_neurons: dict[int, list[int]] = field(default_factory=dict)
    att_heads: dict[int, list[int]] = field(default_factory=dict)
    targets: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        ints = lambda v: None if v is None else [int(x) for x in v]
        per_layer = lambda d: {str(k): ints(v) for k, v in sorted(d.items())}
        return {
            "kept_layers": ints(self.kept_layers),
            "emb_channels": ints(self.emb_channels),
            "mamba_heads": per_layer(self.mamba_heads),
            "mamba_channels": per_layer(self.mamba_channels),
            "ffn_neurons": per_layer(self.ffn_neurons),
            "att_heads": per_layer(self.att_heads),
            "targets": {k: int(v) for k, v in self.targets.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "PrunePlan":
        return cls(
            kept_layers=None if data.get("kept_layers") is None else [int(i) for i in data["kept_layers"]],
            emb_channels=None if data.get("emb_channels") is None else [int(i) for i in data["emb_channels"]],
            mamba_heads=_int_keys(data.get("mamba_heads", {})),
            mamba_channels=_int_keys(data.get("mamba_channels", {})),
            ffn_neurons=_int_keys(data.get("ffn_neurons", {})),
            att_heads=_int_keys(data.get("att_heads", {})),
            targets={k: int(v) for k, v in data.get("targets", {}).items()},
        )

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        return cls.from_dict(json.loads(text))

    @classmethod
    def identity(cls, config: ModelConfig) -> "PrunePlan":
        plan = cls(kept_layers=list(range(config.n_layers)), emb_channels=list(range(config.d_e)))
        for i, kind in enumerate(config.layer_pattern):
            if kind == MAMBA:
                plan.mamba_heads[i] = list(range(config.m_h))
                plan.mamba_channels[i] = list(range(config.m_d))
            elif kind == FFN:
                plan.ffn_neurons[i] = list(range(config.d_ffn))
        return plan

    def validate(self, config: ModelConfig) -> None:
        n = config.n_layers
        kept = range(n) if self.kept_layers is None else self.kept_layers
        if self.kept_layers is not None:
            arr = _check_index_set(self.kept_layers, n, "layers")
            if np.any(np.diff(arr) <= 0):
                raise PlanError("kept layers must be listed in increasing order")
        if self.emb_channels is not None:
            _check_index_set(self.emb_channels, config.d_e, "embedding channels")
        for name, kind in (("mamba_heads", MAMBA), ("mamba_channels", MAMBA), ("ffn_neurons", FFN), ("att_heads", ATTENTION)):
            entries = getattr(self, name)
            for i in entries:
                if not 0 <= i < n or config.layer_pattern[i] != kind:
                    raise PlanError(f"{name}: layer {i} is not a {kind!r} layer")
            wanted = [i for i in kept if config.layer_pattern[i] == kind]
            if entries and set(wanted) - set(entries):
                raise PlanError(f"{name}: missing entries for layers {sorted(set(wanted) - set(entries))}")
            sizes = {len(entries[i]) for i in wanted if i in entries}
            if len(sizes) > 1:
                raise PlanError(f"{name}: every layer must keep the same count, got {sorted(sizes)}")
        for i, heads in self.mamba_heads.items():
            check_group_constraint(heads, config.m_h, config.g)
        for i, ch in self.mamba_channels.items():
            _check_index_set(ch, config.m_d, "mamba channels")
        for i, nr in self.ffn_neurons.items():
            _check_index_set(nr, config.d_ffn, "ffn neurons")
        for i, hs in self.att_heads.items():
            _check_index_set(hs, config.n_att_heads, "attention heads")

    def target_config(self, config: ModelConfig) -> ModelConfig:
        """Config of the model ``apply_plan`` would produce."""
        self.validate(config)
        kept = list(range(config.n_layers)) if self.kept_layers is None else list(self.kept_layers)
        changes: dict = {"layer_pattern": tuple(config.layer_pattern[i] for i in kept)}
        if self.emb_channels is not None:
            changes["d_e"] = len(self.emb_channels)
        first = lambda d: next((len(d[i]) for i in kept if i in d), None)
        if (m_h := first(self.mamba_heads)) is not None:
            changes["m_h"] = m_h
        if (m_d := first(self.mamba_channels)) is not None:
            changes["m_d"] = m_d
        if (d_ffn := first(self.ffn_neurons)) is not None:
            changes["d_ffn"] = d_ffn
        if (nh := first(self.att_heads)) is not None:
            changes["n_att_heads"] = nh
        return config.replace(**changes)


def apply_plan(model: HybridModel, plan: PrunePlan) -> HybridModel:
    """Depth, then embedding, then Mamba, then FFN (then attention heads)."""
    cfg = model.config
    plan.validate(cfg)
    kept = list(range(cfg.n_layers)) if plan.kept_layers is None else list(plan.kept_layers)
    out = trim_depth(model, kept) if plan.kept_layers is not None else model
    if plan.emb_channels is not None:
        out = trim_embedding(out, plan.emb_channels)
    layers = list(out.layers)
    new_index = {old: new for new, old in enumerate(kept)}
    changes: dict = {}
    for old, new in new_index.items():
        layer = layers[new]
        if layer.kind == MAMBA and (old in plan.mamba_heads or old in plan.mamba_channels):
            heads = plan.mamba_heads.get(old, range(layer.m_h))
            chans = plan.mamba_channels.get(old, range(layer.m_d))
            layers[new] = trim_mamba(layer, heads, chans)
            changes.update(m_h=layers[new].m_h, m_d=layers[new].m_d)
    for old, new in new_index.items():
        if layers[new].kind == FFN and old in plan.ffn_neurons:
            layers[new] = trim_ffn(layers[new], plan.ffn_neurons[old])
            changes["d_ffn"] = len(plan.ffn_neurons[old])
    for old, new in new_index.items():
        if layers[new].kind == ATTENTION and old in plan.att_heads:
            layers[new] = trim_attention_heads(layers[new], plan.att_heads[old])
            changes["n_att_heads"] = len(plan.att_heads[old])
    return _rebuild(out, layers, **changes)


def layer_drop_order(config: ModelConfig, layer_kld: np.ndarray | None) -> list[int]:
    """Layer indices from least to most important (ties: lower index dropped first)."""
    if layer_kld is None:
        raise PlanError("depth pruning needs layer_kld scores")
    kld = np.asarray(layer_kld, dtype=np.float64)
    if kld.size != config.n_layers:
        raise PlanError("layer_kld length does not match the model depth")
    return [int(i) for i in np.argsort(kld, kind="stable")]


def kept_layers_for(config: ModelConfig, n_layers: int, drop_order: Sequence[int]) -> list[int]:
    if not 1 <= n_layers <= config.n_layers:
        raise PlanError(f"n_layers={n_layers} outside [1, {config.n_layers}]")
    dropped = set(list(drop_order)[: config.n_layers - n_layers])
    return [i for i in range(config.n_layers) if i not in dropped]


def build_plan(
    config: ModelConfig,
    scores: ScoreSet,
    *,
    n_layers: int | None = None,
    d_e: int | None = None,
    d_ffn: int | None = None,
    m_h: int | None = None,
    m_d: int | None = None,
    n_att_heads: int | None = None,
    metric: str = "l2",
) -> PrunePlan:
    """Rank every prunable axis from precomputed parent scores.

    ``metric`` picks ``"l2"`` activation scores or ``"flap"`` scores for
    Mamba heads/channels, FFN neurons and attention heads.
    """
    if metric not in ("l2", "flap"):
        raise ParameterError(f"unknown metric {metric!r}")
    n_layers = config.n_layers if n_layers is None else n_layers
    d_e = config.d_e if d_e is None else d_e
    d_ffn = config.d_ffn if d_ffn is None else d_ffn
    m_h = config.m_h if m_h is None else m_h
    m_d = config.m_d if m_d is None else m_d
    if m_h % config.g:
        raise PlanError(f"target m_h={m_h} is not divisible by g={config.g}")
    plan = PrunePlan(targets=dict(n_layers=n_layers, d_e=d_e, d_ffn=d_ffn, m_h=m_h, m_d=m_d, k_g=m_h // config.g, k_d=m_d))
    if n_layers != config.n_layers:
        plan.kept_layers = kept_layers_for(config, n_layers, layer_drop_order(config, scores.layer_kld))
    kept = plan.kept_layers if plan.kept_layers is not None else list(range(config.n_layers))
    if d_e != config.d_e:
        if scores.emb is None:
            raise PlanError("embedding pruning needs emb scores")
        plan.emb_channels = top_k_indices(scores.emb, d_e)
    for i in kept:
        kind = config.layer_pattern[i]
        if kind == MAMBA and (m_h, m_d) != (config.m_h, config.m_d):
            if metric == "flap":
                if i not in scores.flap:
                    raise PlanError(f"missing flap scores for layer {i}")
                s = flap_head_matrix(scores.flap[i], config.m_h, config.m_d)
            else:
                if i not in scores.mamba_s:
                    raise PlanError(f"missing mamba scores for layer {i}")
                s = scores.mamba_s[i]
            chans = select_channels(channel_scores(s), m_d)
            plan.mamba_channels[i] = chans
            plan.mamba_heads[i] = rank_group_constrained(head_scores(s, chans), config.g, m_h // config.g)
        elif kind == FFN and d_ffn != config.d_ffn:
            src = scores.flap if metric == "flap" else scores.ffn
            if i not in src:
                raise PlanError(f"missing {metric} scores for ffn layer {i}")
            plan.ffn_neurons[i] = top_k_indices(src[i], d_ffn)
        elif kind == ATTENTION and n_att_heads is not None and n_att_heads != config.n_att_heads:
            if metric == "flap":
                if i not in scores.flap:
                    raise PlanError(f"missing flap scores for attention layer {i}")
                per_head = flap_attention_heads(scores.flap[i], config.n_att_heads)
            else:
                if i not in scores.att:
                    raise PlanError(f"missing att scores for layer {i}")
                per_head = scores.att[i]
            plan.att_heads[i] = top_k_indices(per_head, n_att_heads)
            plan.targets["n_att_heads"] = n_att_heads
    return plan

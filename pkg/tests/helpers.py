"""Shared test oracles: joint head permutation and masking of Mamba layers."""

from __future__ import annotations

import dataclasses

import numpy as np

from hybridprune.model import MambaLayerWeights


def permute_heads(w: MambaLayerWeights, perm) -> MambaLayerWeights:
    """Reorder heads jointly in every per-head tensor (B/C untouched)."""
    perm = np.asarray(perm)
    m_d = w.m_d
    flat = (perm[:, None] * m_d + np.arange(m_d)[None, :]).reshape(-1)
    a = np.asarray
    return dataclasses.replace(
        w,
        W_z=a(w.W_z)[:, flat], W_x=a(w.W_x)[:, flat], W_O=a(w.W_O)[flat, :],
        W_dt=a(w.W_dt)[:, perm], dt_bias=a(w.dt_bias)[perm], A_log=a(w.A_log)[perm], D=a(w.D)[perm],
        conv_x_w=a(w.conv_x_w)[:, flat], conv_x_b=a(w.conv_x_b)[flat], gate_norm=a(w.gate_norm)[flat],
    )


def within_group_perm(rng, m_h: int, g: int) -> np.ndarray:
    per = m_h // g
    return np.concatenate([k * per + rng.permutation(per) for k in range(g)])


def zero_mamba_heads(w: MambaLayerWeights, heads, channels=()) -> MambaLayerWeights:
    """Zero W_x/W_z/W_O entries of dropped heads and dropped channels, and their D."""
    m_h, m_d = w.m_h, w.m_d
    mask = np.ones((m_h, m_d), dtype=bool)
    mask[list(heads), :] = False
    mask[:, list(channels)] = False
    flat = ~mask.reshape(-1)
    W_x, W_z, W_O = (np.array(getattr(w, n)) for n in ("W_x", "W_z", "W_O"))
    W_x[:, flat] = 0.0
    W_z[:, flat] = 0.0
    W_O[flat, :] = 0.0
    D = np.array(w.D)
    D[list(heads)] = 0.0
    conv_b = np.array(w.conv_x_b)
    conv_b[flat] = 0.0
    return dataclasses.replace(w, W_x=W_x, W_z=W_z, W_O=W_O, D=D, conv_x_b=conv_b)


def mask_model(model, plan):
    """Zero every parameter ``apply_plan(model, plan)`` would remove, keeping shapes."""
    from hybridprune.model import HybridModel

    cfg = model.config
    layers = list(model.layers)
    a = np.array
    for i, layer in enumerate(layers):
        if plan.kept_layers is not None and i not in plan.kept_layers:
            out_name = {"M": "W_O", "A": "W_o", "F": "W_2"}[layer.kind]
            layers[i] = dataclasses.replace(layer, **{out_name: np.zeros_like(getattr(layer, out_name))})
            continue
        if layer.kind == "M" and (i in plan.mamba_heads or i in plan.mamba_channels):
            heads = set(plan.mamba_heads.get(i, range(layer.m_h)))
            chans = set(plan.mamba_channels.get(i, range(layer.m_d)))
            layers[i] = zero_mamba_heads(layer, [h for h in range(layer.m_h) if h not in heads],
                                         [d for d in range(layer.m_d) if d not in chans])
        elif layer.kind == "F" and i in plan.ffn_neurons:
            drop = [n for n in range(a(layer.W_1).shape[0]) if n not in set(plan.ffn_neurons[i])]
            W_1, W_2 = a(layer.W_1), a(layer.W_2)
            W_1[drop, :] = 0.0
            W_2[:, drop] = 0.0
            layers[i] = dataclasses.replace(layer, W_1=W_1, W_2=W_2)
        elif layer.kind == "A" and i in plan.att_heads:
            hd = layer.head_dim
            drop = [h for h in range(layer.n_heads) if h not in set(plan.att_heads[i])]
            W_v, W_o = a(layer.W_v), a(layer.W_o)
            for h in drop:
                W_v[:, h * hd:(h + 1) * hd] = 0.0
                W_o[h * hd:(h + 1) * hd, :] = 0.0
            layers[i] = dataclasses.replace(layer, W_v=W_v, W_o=W_o)
    embed, final_norm, unembed = a(model.embed), a(model.final_norm), a(model.unembed)
    if plan.emb_channels is not None:
        drop = [c for c in range(cfg.d_e) if c not in set(plan.emb_channels)]
        embed[:, drop] = 0.0
        final_norm[drop] = 0.0
        unembed[drop, :] = 0.0
        for i, layer in enumerate(layers):
            norm = a(layer.norm)
            norm[drop] = 0.0
            out_name = {"M": "W_O", "A": "W_o", "F": "W_2"}[layer.kind]
            out = a(getattr(layer, out_name))
            if layer.kind == "F":
                out[drop, :] = 0.0
            else:
                out[:, drop] = 0.0
            layers[i] = dataclasses.replace(layer, norm=norm, **{out_name: out})
    return HybridModel(cfg, embed, layers, final_norm, unembed)


def random_plan(rng, config, prune_depth=True):
    """A valid plan with random keep-sets on every axis."""
    from hybridprune.pruner import PrunePlan

    def subset(n, k):
        return sorted(int(v) for v in rng.choice(n, size=k, replace=False))

    plan = PrunePlan()
    n = config.n_layers
    if prune_depth and n > 1:
        plan.kept_layers = subset(n, int(rng.integers(1, n + 1)))
    kept = plan.kept_layers if plan.kept_layers is not None else range(n)
    plan.emb_channels = subset(config.d_e, int(rng.integers(1, config.d_e + 1)))
    per = config.m_h // config.g
    k_g = int(rng.integers(1, per + 1))
    m_d = int(rng.integers(1, config.m_d + 1))
    d_ffn = int(rng.integers(1, config.d_ffn + 1))
    for i in kept:
        kind = config.layer_pattern[i]
        if kind == "M":
            plan.mamba_heads[i] = [h for grp in range(config.g) for h in sorted(grp * per + rng.choice(per, k_g, replace=False))]
            plan.mamba_channels[i] = subset(config.m_d, m_d)
        elif kind == "F":
            plan.ffn_neurons[i] = subset(config.d_ffn, d_ffn)
    return plan

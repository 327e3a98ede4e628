"""Toy hybrid Mamba2 / attention / FFN language model.

Weights are stored in the orientation they are applied in: activations are
row vectors and projections right-multiply them (``x = LN(X) @ W_x`` with
``W_x`` of shape ``d_e x (m_h*m_d)``). The FFN follows the usual
``W_1: d_ffn x d_e``, ``W_2: d_e x d_ffn`` layout, so ``W_1[i]`` is the
weight row of neuron ``i``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from . import numkit as nk
from .numkit import DimensionError, InputError, Tensor
from .ssm import ConfigError, ssm_scan

MAMBA, ATTENTION, FFN = "M", "A", "F"
LAYER_KINDS = (MAMBA, ATTENTION, FFN)
_KIND_ALIASES = {
    "M": MAMBA, "MAMBA": MAMBA,
    "A": ATTENTION, "ATTENTION": ATTENTION, "*": ATTENTION,
    "F": FFN, "FFN": FFN, "MLP": FFN, "-": FFN,
}


def parse_pattern(pattern: str | Sequence[str]) -> tuple[str, ...]:
    """Accepts ``"MAFMF"``, ``"M,A,F"`` or a sequence of names."""
    if isinstance(pattern, str):
        items = [p for p in pattern.replace(",", " ").split()] if ("," in pattern or " " in pattern) else list(pattern)
    else:
        items = list(pattern)
    try:
        return tuple(_KIND_ALIASES[str(p).strip().upper()] for p in items)
    except KeyError as exc:
        raise ConfigError(f"unknown layer kind {exc.args[0]!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    layer_pattern: tuple[str, ...]
    d_e: int
    d_ffn: int
    m_h: int
    m_d: int
    g: int
    d_s: int
    n_att_heads: int
    vocab: int
    conv_k: int = 4
    att_head_dim: int | None = None
    # RMSNorm divisors; pinned to the parent's widths when a model is trimmed
    embed_norm_dim: int | None = None
    mamba_norm_dim: int | None = None
    norm_eps: float = 1e-6
    n_layers: int | None = None

    def __post_init__(self):
        pattern = parse_pattern(self.layer_pattern)
        object.__setattr__(self, "layer_pattern", pattern)
        if self.n_layers is None:
            object.__setattr__(self, "n_layers", len(pattern))
        if self.att_head_dim is None and self.n_att_heads > 0 and self.d_e % self.n_att_heads == 0:
            object.__setattr__(self, "att_head_dim", self.d_e // self.n_att_heads)
        if self.embed_norm_dim is None:
            object.__setattr__(self, "embed_norm_dim", self.d_e)
        if self.mamba_norm_dim is None:
            object.__setattr__(self, "mamba_norm_dim", self.m_h * self.m_d)
        self.validate()

    def validate(self) -> None:
        if self.n_layers != len(self.layer_pattern):
            raise ConfigError(f"n_layers={self.n_layers} but pattern has {len(self.layer_pattern)} entries")
        if len(self.layer_pattern) < 1:
            raise ConfigError("model needs at least one layer")
        for name in ("d_e", "d_ffn", "m_h", "m_d", "g", "d_s", "vocab", "conv_k"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.m_h % self.g:
            raise ConfigError(f"m_h={self.m_h} is not divisible by g={self.g}")
        if ATTENTION in self.layer_pattern:
            if self.n_att_heads < 1:
                raise ConfigError("attention layers need n_att_heads >= 1")
            if self.att_head_dim is None:
                raise ConfigError(f"d_e={self.d_e} is not divisible by n_att_heads={self.n_att_heads}")

    @property
    def heads_per_group(self) -> int:
        return self.m_h // self.g

    @property
    def d_inner(self) -> int:
        return self.m_h * self.m_d

    def replace(self, **changes) -> "ModelConfig":
        if "layer_pattern" in changes and "n_layers" not in changes:
            changes["n_layers"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["layer_pattern"] = "".join(self.layer_pattern)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))


# ---------------------------------------------------------------------------
# layer weights
# ---------------------------------------------------------------------------


@dataclass
class MambaLayerWeights:
    norm: Any          # d_e, pre-norm scale
    W_z: Any           # d_e x m_h*m_d
    W_x: Any           # d_e x m_h*m_d
    W_B: Any           # d_e x g*d_s
    W_C: Any           # d_e x g*d_s
    W_dt: Any          # d_e x m_h
    dt_bias: Any       # m_h
    A_log: Any         # m_h; A = -exp(A_log) < 0
    D: Any             # m_h
    conv_x_w: Any      # K x m_h*m_d
    conv_x_b: Any
    conv_B_w: Any      # K x g*d_s
    conv_B_b: Any
    conv_C_w: Any
    conv_C_b: Any
    gate_norm: Any     # m_h*m_d
    W_O: Any           # m_h*m_d x d_e
    g: int = field(default=1, metadata={"static": True})
    kind = MAMBA

    @property
    def m_h(self) -> int:
        return _arr(self.A_log).shape[0]

    @property
    def m_d(self) -> int:
        return _arr(self.W_x).shape[1] // self.m_h

    @property
    def d_s(self) -> int:
        return _arr(self.W_B).shape[1] // self.g

    @property
    def A(self) -> np.ndarray:
        return -np.exp(_arr(self.A_log))


@dataclass
class AttentionLayerWeights:
    norm: Any          # d_e
    W_q: Any           # d_e x nh*hd
    W_k: Any
    W_v: Any
    W_o: Any           # nh*hd x d_e
    n_heads: int = field(default=1, metadata={"static": True})
    kind = ATTENTION

    @property
    def head_dim(self) -> int:
        return _arr(self.W_q).shape[1] // self.n_heads


@dataclass
class FFNLayerWeights:
    norm: Any          # d_e
    W_1: Any           # d_ffn x d_e
    W_2: Any           # d_e x d_ffn
    kind = FFN


LayerWeights = MambaLayerWeights | AttentionLayerWeights | FFNLayerWeights


def _arr(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def array_fields(layer) -> list[str]:
    return [f.name for f in dataclasses.fields(layer) if not f.metadata.get("static")]


def map_layer(layer, fn: Callable[[str, Any], Any]):
    changes = {name: fn(name, getattr(layer, name)) for name in array_fields(layer)}
    return dataclasses.replace(layer, **changes)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class HybridModel:
    config: ModelConfig
    embed: Any        # vocab x d_e
    layers: list
    final_norm: Any   # d_e
    unembed: Any      # d_e x vocab

    def named_parameters(self) -> Iterator[tuple[str, Any]]:
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for name in array_fields(layer):
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "final_norm", self.final_norm
        yield "unembed", self.unembed

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def map_params(self, fn: Callable[[str, Any], Any]) -> "HybridModel":
        # visit tensors in named_parameters() order
        embed = fn("embed", self.embed)
        layers = [
            map_layer(layer, lambda n, v, i=i: fn(f"layers.{i}.{n}", v)) for i, layer in enumerate(self.layers)
        ]
        final_norm = fn("final_norm", self.final_norm)
        return HybridModel(self.config, embed, layers, final_norm, fn("unembed", self.unembed))

    def copy(self) -> "HybridModel":
        return self.map_params(lambda _, v: np.array(_arr(v), dtype=np.float64, copy=True))

    def as_trainable(self) -> "HybridModel":
        return self.map_params(lambda _, v: Tensor(np.array(_arr(v)), requires_grad=True))

    def detached(self) -> "HybridModel":
        return self.map_params(lambda _, v: np.array(_arr(v)))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: _arr(v) for name, v in self.named_parameters()}

    def n_params(self) -> int:
        return int(sum(_arr(v).size for v in self.parameters()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.config.to_dict()).encode())
        for name, v in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(_arr(v)).tobytes())
        return h.hexdigest()

    def forward(self, tokens, **kwargs) -> np.ndarray:
        return _arr(model_forward(self, tokens, **kwargs))

    @classmethod
    def from_state_dict(cls, config: ModelConfig, state: Mapping[str, np.ndarray]) -> "HybridModel":
        template = init_model(config, seed=0, zeros=True)

        def pick(name, v):
            if name not in state:
                raise DimensionError(f"missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != _arr(v).shape:
                raise DimensionError(f"tensor {name!r} has shape {arr.shape}, expected {_arr(v).shape}")
            return arr

        model = template.map_params(pick)
        extra = set(state) - {n for n, _ in model.named_parameters()}
        if extra:
            raise DimensionError(f"unexpected tensors: {sorted(extra)}")
        return model


def init_model(config: ModelConfig, seed: int = 0, zeros: bool = False) -> HybridModel:
    """Random initialization; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    d_e, k = config.d_e, config.conv_k
    out_scale = 1.0 / np.sqrt(2.0 * config.n_layers)

    def normal(shape, std):
        return np.zeros(shape) if zeros else rng.normal(0.0, std, size=shape)

    def proj(fan_in, fan_out, scale=1.0):
        return normal((fan_in, fan_out), scale / np.sqrt(fan_in))

    layers: list = []
    for kind in config.layer_pattern:
        if kind == MAMBA:
            di, gs, mh = config.d_inner, config.g * config.d_s, config.m_h
            if zeros:
                dt_bias = np.zeros(mh)
                a_log = np.zeros(mh)
            else:
                dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=mh))
                dt_bias = dt0 + np.log(-np.expm1(-dt0))  # inverse softplus
                a_log = np.log(rng.uniform(1.0, 16.0, size=mh))
            layers.append(
                MambaLayerWeights(
                    norm=np.ones(d_e),
                    W_z=proj(d_e, di),
                    W_x=proj(d_e, di),
                    W_B=proj(d_e, gs),
                    W_C=proj(d_e, gs),
                    W_dt=proj(d_e, mh, 0.1),
                    dt_bias=dt_bias,
                    A_log=a_log,
                    D=np.ones(mh),
                    conv_x_w=normal((k, di), 1.0 / np.sqrt(k)),
                    conv_x_b=np.zeros(di),
                    conv_B_w=normal((k, gs), 1.0 / np.sqrt(k)),
                    conv_B_b=np.zeros(gs),
                    conv_C_w=normal((k, gs), 1.0 / np.sqrt(k)),
                    conv_C_b=np.zeros(gs),
                    gate_norm=np.ones(di),
                    W_O=proj(di, d_e, out_scale),
                    g=config.g,
                )
            )
        elif kind == ATTENTION:
            inner = config.n_att_heads * config.att_head_dim
            layers.append(
                AttentionLayerWeights(
                    norm=np.ones(d_e),
                    W_q=proj(d_e, inner),
                    W_k=proj(d_e, inner),
                    W_v=proj(d_e, inner),
                    W_o=proj(inner, d_e, out_scale),
                    n_heads=config.n_att_heads,
                )
            )
        else:
            layers.append(
                FFNLayerWeights(
                    norm=np.ones(d_e),
                    W_1=normal((config.d_ffn, d_e), 1.0 / np.sqrt(d_e)),
                    W_2=normal((d_e, config.d_ffn), out_scale / np.sqrt(config.d_ffn)),
                )
            )
    return HybridModel(
        config=config,
        embed=normal((config.vocab, d_e), 1.0),
        layers=layers,
        final_norm=np.ones(d_e),
        unembed=proj(d_e, config.vocab),
    )


def param_count(config: ModelConfig) -> int:
    """Exact parameter total; embedding and unembedding are counted separately."""
    d_e, k = config.d_e, config.conv_k
    di, gs, mh = config.d_inner, config.g * config.d_s, config.m_h
    mamba = d_e + 2 * d_e * di + 2 * d_e * gs + d_e * mh + 3 * mh + (k + 1) * di + 2 * (k + 1) * gs + di + di * d_e
    inner = config.n_att_heads * (config.att_head_dim or 0)
    attention = d_e + 4 * d_e * inner
    ffn = d_e + 2 * d_e * config.d_ffn
    per_kind = {MAMBA: mamba, ATTENTION: attention, FFN: ffn}
    blocks = sum(per_kind[kind] for kind in config.layer_pattern)
    return int(2 * config.vocab * d_e + d_e + blocks)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _t(v) -> Tensor:
    return nk.as_tensor(v)


def mamba_forward(
    w: MambaLayerWeights,
    X,
    *,
    embed_norm_dim: int | None = None,
    mamba_norm_dim: int | None = None,
    eps: float = 1e-6,
    trace: dict | None = None,
    prefix: str = "",
) -> Tensor:
    """Block output (no residual) for input ``X`` of shape (..., L, d_e)."""
    X = _t(X)
    m_h, m_d, g, d_s = w.m_h, w.m_d, w.g, w.d_s
    lead = X.shape[:-1]
    u = nk.rms_norm(X, _t(w.norm), eps, embed_norm_dim)
    z = u @ _t(w.W_z)
    x = u @ _t(w.W_x)
    B = u @ _t(w.W_B)
    C = u @ _t(w.W_C)
    dt = u @ _t(w.W_dt) + _t(w.dt_bias)
    xc = nk.silu(nk.conv1d_causal(x, _t(w.conv_x_w), _t(w.conv_x_b)))
    Bc = nk.silu(nk.conv1d_causal(B, _t(w.conv_B_w), _t(w.conv_B_b)))
    Cc = nk.silu(nk.conv1d_causal(C, _t(w.conv_C_w), _t(w.conv_C_b)))
    A = -nk.exp(_t(w.A_log))
    y = ssm_scan(
        xc.reshape(lead + (m_h, m_d)),
        Bc.reshape(lead + (g, d_s)),
        Cc.reshape(lead + (g, d_s)),
        A,
        _t(w.D),
        dt,
    )
    y = y.reshape(lead + (m_h * m_d,))
    gated = nk.rms_norm(y, _t(w.gate_norm), eps, mamba_norm_dim) * nk.silu(z)
    if trace is not None:
        trace[prefix + "norm_out"] = u.data
        trace[prefix + "x_proj"] = x.data
        trace[prefix + "z_proj"] = z.data
        trace[prefix + "out_proj_in"] = gated.data
    return gated @ _t(w.W_O)


_MASK_VALUE = -1e30


def attention_forward(
    w: AttentionLayerWeights,
    X,
    *,
    embed_norm_dim: int | None = None,
    eps: float = 1e-6,
    trace: dict | None = None,
    prefix: str = "",
) -> Tensor:
    X = _t(X)
    nh, hd = w.n_heads, w.head_dim
    lead = X.shape[:-2]
    L = X.shape[-2]
    u = nk.rms_norm(X, _t(w.norm), eps, embed_norm_dim)

    def heads(t: Tensor) -> Tensor:
        return nk.swapaxes(t.reshape(lead + (L, nh, hd)), -2, -3)  # (..., nh, L, hd)

    q = heads(u @ _t(w.W_q))
    k = heads(u @ _t(w.W_k))
    v = heads(u @ _t(w.W_v))
    scores = (q @ nk.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
    mask = np.triu(np.full((L, L), _MASK_VALUE), k=1)
    probs = nk.softmax_temp(scores + mask, 1.0)
    ctx = nk.swapaxes(probs @ v, -2, -3)  # (..., L, nh, hd)
    if trace is not None:
        trace[prefix + "norm_out"] = u.data
        trace[prefix + "head_out"] = ctx.data
    return ctx.reshape(lead + (L, nh * hd)) @ _t(w.W_o)


def ffn_forward(
    w: FFNLayerWeights,
    X,
    *,
    embed_norm_dim: int | None = None,
    eps: float = 1e-6,
    trace: dict | None = None,
    prefix: str = "",
) -> Tensor:
    X = _t(X)
    u = nk.rms_norm(X, _t(w.norm), eps, embed_norm_dim)
    pre = u @ nk.swapaxes(_t(w.W_1), 0, 1)
    hidden = nk.relu_squared(pre)
    if trace is not None:
        trace[prefix + "norm_out"] = u.data
        trace[prefix + "pre_act"] = pre.data
        trace[prefix + "hidden"] = hidden.data
    return hidden @ nk.swapaxes(_t(w.W_2), 0, 1)


def block_forward(model: HybridModel, index: int, X, trace: dict | None = None) -> Tensor:
    cfg = model.config
    layer = model.layers[index]
    prefix = f"{index}."
    common = dict(embed_norm_dim=cfg.embed_norm_dim, eps=cfg.norm_eps, trace=trace, prefix=prefix)
    if layer.kind == MAMBA:
        return mamba_forward(layer, X, mamba_norm_dim=cfg.mamba_norm_dim, **common)
    if layer.kind == ATTENTION:
        return attention_forward(layer, X, **common)
    return ffn_forward(layer, X, **common)


def check_tokens(tokens, vocab: int) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.dtype.kind not in "iu":
        if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InputError("token ids must be integers")
        arr = arr.astype(np.int64)
    arr = arr.astype(np.int64, copy=False)
    if arr.ndim not in (1, 2) or arr.shape[-1] < 1:
        raise InputError(f"tokens must be a non-empty (L,) or (B, L) array, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise InputError(f"token ids must lie in [0, {vocab})")
    return arr


def model_forward(
    model: HybridModel,
    tokens,
    *,
    skip_layers: Sequence[int] = (),
    trace: dict | None = None,
) -> Tensor:
    """Logits (..., L, vocab). Skipped layers pass the residual stream through."""
    cfg = model.config
    ids = check_tokens(tokens, cfg.vocab)
    h = nk.take_rows(_t(model.embed), ids)
    skip = set(skip_layers)
    for i in range(len(model.layers)):
        if i in skip:
            continue
        h = h + block_forward(model, i, h, trace)
    out = nk.rms_norm(h, _t(model.final_norm), cfg.norm_eps, cfg.embed_norm_dim)
    if trace is not None:
        trace["final.norm_out"] = out.data
    return out @ _t(model.unembed)


def token_cross_entropy(model: HybridModel, tokens) -> float:
    """Mean next-token cross-entropy over all positions of all sequences."""
    total, count = 0.0, 0
    for seq in iter_sequences(tokens):
        if len(seq) < 2:
            continue
        logp = nk.log_softmax_temp_np(model.forward(seq[:-1]))
        total += float(-logp[np.arange(len(seq) - 1), seq[1:]].sum())
        count += len(seq) - 1
    if count == 0:
        raise InputError("need at least one sequence of length >= 2")
    return total / count


def iter_sequences(tokens) -> Iterator[np.ndarray]:
    """Yield 1-D int arrays from a (B, L) array, a 1-D array, or a list of arrays."""
    if isinstance(tokens, np.ndarray):
        if tokens.ndim == 1:
            yield tokens.astype(np.int64)
            return
        for row in tokens:
            yield row.astype(np.int64)
        return
    for seq in tokens:
        yield np.asarray(seq, dtype=np.int64)

"""Selective state-space scan with grouped B/C broadcast.

Shapes (leading batch axes ``...`` are optional)::

    x   (..., L, H, P)   per-head inputs after the causal conv
    B,C (..., L, G, N)   one block per group, shared by the H/G heads of it
    A   (H,)             negative decay rates
    D   (H,)             feed-through
    dt  (..., L, H)      raw step sizes; softplus is applied here

Recurrence per head ``h`` in group ``h // (H/G)``::

    delta_t = softplus(dt_t)
    state_t = exp(delta_t * A_h) * state_{t-1} + delta_t * x_t (outer) B_t
    y_t     = state_t @ C_t + D_h * x_t
"""

from __future__ import annotations

import numpy as np

from .numkit import DTYPE, DimensionError, Tensor, _make, _sigmoid, _softplus, as_tensor

# exp(-700) is below double-precision resolution for any O(1) state
_MIN_LOG_DECAY = -700.0


class ConfigError(ValueError):
    """Architectural hyperparameters are inconsistent."""


def _heads_per_group(n_heads: int, n_groups: int) -> int:
    if n_groups < 1 or n_heads % n_groups:
        raise ConfigError(f"{n_heads} heads cannot be split evenly into {n_groups} groups")
    return n_heads // n_groups


def _validate(x, B, C, A, D, dt) -> int:
    *lead, L, H, P = x.shape
    if B.shape != C.shape or B.shape[:-2] != tuple(lead) + (L,):
        raise DimensionError(f"B {B.shape} / C {C.shape} do not match x {x.shape}")
    if A.shape != (H,) or D.shape != (H,):
        raise DimensionError(f"A {A.shape} and D {D.shape} must be ({H},)")
    if dt.shape != tuple(lead) + (L, H):
        raise DimensionError(f"dt {dt.shape} does not match x {x.shape}")
    return _heads_per_group(H, B.shape[-2])


def ssm_scan_reference(x, B, C, A, D, dt) -> np.ndarray:
    """Literal per-timestep, per-head recurrence. Slow; used as an oracle."""
    x, B, C = (np.asarray(v, dtype=DTYPE) for v in (x, B, C))
    A, D, dt = (np.asarray(v, dtype=DTYPE) for v in (A, D, dt))
    hpg = _validate(x, B, C, A, D, dt)
    lead = x.shape[:-3]
    L, H, P = x.shape[-3:]
    N = B.shape[-1]
    y = np.zeros_like(x)
    for idx in np.ndindex(*lead):
        for h in range(H):
            grp = h // hpg
            state = np.zeros((P, N))
            for t in range(L):
                delta = float(_softplus(np.float64(dt[idx + (t, h)])))
                decay = np.exp(delta * A[h])
                state = decay * state + delta * np.outer(x[idx + (t, h)], B[idx + (t, grp)])
                y[idx + (t, h)] = state @ C[idx + (t, grp)] + D[h] * x[idx + (t, h)]
    return y


def _ssm_recurrent_forward(xd, Bh, Ch, Ad, Dd, delta, decay):
    *lead, L, H, P = xd.shape
    N = Bh.shape[-1]
    states = np.empty(tuple(lead) + (L, H, P, N))
    y = np.empty_like(xd)
    state = np.zeros(tuple(lead) + (H, P, N))
    for t in range(L):
        u = (delta[..., t, :, None] * xd[..., t, :, :])[..., None] * Bh[..., t, :, None, :]
        state = decay[..., t, :, None, None] * state + u
        states[..., t, :, :, :] = state
        y[..., t, :, :] = np.einsum("...hpn,...hn->...hp", state, Ch[..., t, :, :])
    y += Dd[:, None] * xd
    return y, states


def ssm_scan_recurrent(x: Tensor, B: Tensor, C: Tensor, A: Tensor, D: Tensor, dt: Tensor) -> Tensor:
    """Differentiable scan: stepwise forward, reverse-time adjoint backward."""
    x, B, C, A, D, dt = (as_tensor(v) for v in (x, B, C, A, D, dt))
    hpg = _validate(x, B, C, A, D, dt)
    xd, Ad, Dd, dtd = x.data, A.data, D.data, dt.data
    Bh = np.repeat(B.data, hpg, axis=-2)
    Ch = np.repeat(C.data, hpg, axis=-2)
    delta = _softplus(dtd)
    decay = np.exp(delta * Ad)
    y, states = _ssm_recurrent_forward(xd, Bh, Ch, Ad, Dd, delta, decay)

    def vjp(gy):
        *lead, L, H, P = xd.shape
        N = Bh.shape[-1]
        G = H // hpg
        gstate = np.zeros(tuple(lead) + (H, P, N))
        gu = np.empty_like(xd)
        gBh = np.empty_like(Bh)
        gCh = np.empty_like(Ch)
        gdecay = np.empty_like(decay)
        zero = np.zeros(tuple(lead) + (H, P, N))
        for t in range(L - 1, -1, -1):
            s_t = states[..., t, :, :, :]
            gy_t = gy[..., t, :, :]
            gstate = gstate + gy_t[..., None] * Ch[..., t, :, None, :]
            gCh[..., t, :, :] = np.einsum("...hp,...hpn->...hn", gy_t, s_t)
            u_x = delta[..., t, :, None] * xd[..., t, :, :]
            gu[..., t, :, :] = np.einsum("...hpn,...hn->...hp", gstate, Bh[..., t, :, :])
            gBh[..., t, :, :] = np.einsum("...hpn,...hp->...hn", gstate, u_x)
            prev = states[..., t - 1, :, :, :] if t > 0 else zero
            gdecay[..., t, :] = np.einsum("...hpn,...hpn->...h", gstate, prev)
            gstate = gstate * decay[..., t, :, None, None]
        gx = gu * delta[..., None] + gy * Dd[:, None]
        gdelta = (gu * xd).sum(axis=-1) + gdecay * decay * Ad
        gA = (gdecay * decay * delta).reshape(-1, H).sum(axis=0)
        gD = (gy * xd).reshape(-1, H, P).sum(axis=(0, 2))
        gdt = gdelta * _sigmoid(dtd)
        gB = gBh.reshape(gBh.shape[:-2] + (G, hpg, N)).sum(axis=-2)
        gC = gCh.reshape(gCh.shape[:-2] + (G, hpg, N)).sum(axis=-2)
        return gx, gB, gC, gA, gD, gdt

    return _make(y, (x, B, C, A, D, dt), vjp, "ssm_scan")


def ssm_scan_chunked(x, B, C, A, D, dt, chunk_size: int = 16) -> np.ndarray:
    """Chunked scan: quadratic attention-like form inside each chunk, state
    carried between chunks. Forward only."""
    x, B, C = (np.asarray(v, dtype=DTYPE) for v in (x, B, C))
    A, D, dt = (np.asarray(v, dtype=DTYPE) for v in (A, D, dt))
    hpg = _validate(x, B, C, A, D, dt)
    *lead, L, H, P = x.shape
    N = B.shape[-1]
    Bh = np.repeat(B, hpg, axis=-2)
    Ch = np.repeat(C, hpg, axis=-2)
    delta = _softplus(dt)
    log_decay = np.maximum(delta * A, _MIN_LOG_DECAY)
    xs = x * delta[..., None]
    y = np.empty_like(x)
    state = np.zeros(tuple(lead) + (H, P, N))
    for start in range(0, L, chunk_size):
        stop = min(start + chunk_size, L)
        q = stop - start
        cum = np.cumsum(log_decay[..., start:stop, :], axis=-2)  # (..., q, H)
        # seg[..., h, t, k] = cum_t - cum_k for k <= t
        ct = np.swapaxes(cum, -1, -2)
        seg = ct[..., :, None] - ct[..., None, :]
        tri = np.tril(np.ones((q, q), dtype=bool))
        weights = np.where(tri, np.exp(np.where(tri, seg, 0.0)), 0.0)  # (..., H, q, q)
        cb = np.einsum("...thn,...khn->...htk", Ch[..., start:stop, :, :], Bh[..., start:stop, :, :])
        y_intra = np.einsum("...htk,...khp->...thp", weights * cb, xs[..., start:stop, :, :])
        inbound = np.exp(cum)  # decay from chunk start to t
        y_inter = np.einsum("...thn,...hpn->...thp", Ch[..., start:stop, :, :], state) * inbound[..., None]
        y[..., start:stop, :, :] = y_intra + y_inter
        outbound = np.exp(cum[..., -1:, :] - cum)  # decay from k to chunk end
        contrib = np.einsum(
            "...kh,...khp,...khn->...hpn", outbound, xs[..., start:stop, :, :], Bh[..., start:stop, :, :]
        )
        state = np.exp(cum[..., -1, :])[..., None, None] * state + contrib
    return y + D[:, None] * x


def ssm_scan(x, B, C, A, D, dt, chunk_size: int = 16):
    """Dispatch: differentiable recurrence when any input needs gradients,
    chunked evaluation otherwise. Returns a Tensor in both cases."""
    args = [as_tensor(v) for v in (x, B, C, A, D, dt)]
    if any(a.requires_grad for a in args):
        return ssm_scan_recurrent(*args)
    return Tensor(ssm_scan_chunked(*(a.data for a in args), chunk_size=chunk_size))

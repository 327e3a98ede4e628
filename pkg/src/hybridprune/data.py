"""Synthetic Markov-chain token corpora for desk-scale experiments."""

from __future__ import annotations

import numpy as np


def markov_transitions(vocab: int, branching: int = 4, concentration: float = 1.0, seed: int = 0) -> np.ndarray:
    """Row-stochastic ``vocab x vocab`` matrix with ``branching`` successors per token."""
    if not 1 <= branching <= vocab:
        raise ValueError(f"branching must lie in [1, {vocab}]")
    rng = np.random.default_rng(seed)
    P = np.zeros((vocab, vocab))
    for tok in range(vocab):
        succ = rng.choice(vocab, size=branching, replace=False)
        P[tok, succ] = rng.dirichlet(np.full(branching, concentration))
    return P


def sample_markov(P: np.ndarray, n_sequences: int, length: int, seed: int = 0) -> np.ndarray:
    """``n_sequences x length`` int64 token matrix; starts drawn uniformly."""
    rng = np.random.default_rng(seed)
    vocab = P.shape[0]
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    out = np.empty((n_sequences, length), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab, size=n_sequences)
    for t in range(1, length):
        u = rng.random(n_sequences)
        rows = cum[out[:, t - 1]]
        out[:, t] = (rows < u[:, None]).sum(axis=1)
    return out


def markov_entropy_rate(P: np.ndarray, iters: int = 2000) -> float:
    """Entropy rate (nats/token) under the chain's stationary distribution."""
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(iters):
        pi = pi @ P
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return float(pi @ h)


def sample_switching_markov(Ps: np.ndarray, n_sequences: int, length: int, seed: int = 0) -> np.ndarray:
    """Like ``sample_markov`` but each sequence follows ``Ps[first_token % R]``.

    The regime is fixed by the first token, so predicting well needs context
    beyond the previous token.
    """
    Ps = np.asarray(Ps)
    if Ps.ndim != 3 or Ps.shape[1] != Ps.shape[2]:
        raise ValueError(f"expected an (R, vocab, vocab) stack, got shape {Ps.shape}")
    rng = np.random.default_rng(seed)
    n_regimes, vocab = Ps.shape[0], Ps.shape[1]
    cum = np.cumsum(Ps, axis=2)
    cum[:, :, -1] = 1.0
    out = np.empty((n_sequences, length), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab, size=n_sequences)
    regime = out[:, 0] % n_regimes
    for t in range(1, length):
        u = rng.random(n_sequences)
        rows = cum[regime, out[:, t - 1]]
        out[:, t] = (rows < u[:, None]).sum(axis=1)
    return out

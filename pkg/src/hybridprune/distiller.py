"""Logit distillation (forward KL, teacher to student) and LM pretraining."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numkit as nk
from .model import HybridModel, _arr, check_tokens, model_forward, token_cross_entropy
from .numkit import DimensionError, InputError, ParameterError, Tensor


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float, trace: list):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss
        self.trace = trace


@dataclass(frozen=True)
class KDConfig:
    tau: float = 1.0
    lr_start: float = 0.5
    lr_end: float = 0.005
    warmup_steps: int = 10
    total_steps: int = 500
    batch_size: int = 8
    seq_len: int = 32
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError("tau must be positive")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ParameterError("learning rates must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ParameterError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ParameterError("batch_size and seq_len must be positive")


def lr_schedule(step: int, cfg: KDConfig) -> float:
    """Linear warmup from 0 to ``lr_start``, then cosine decay to ``lr_end``."""
    if not 0 <= step <= cfg.total_steps:
        raise ParameterError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_start * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.lr_start
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * progress))


def kd_loss(teacher_logits, student_logits, tau: float = 1.0) -> Tensor:
    """Mean over positions of KL(p_teacher || p_student) at temperature ``tau``.

    The teacher side is a constant. No tau**2 rescaling is applied.
    """
    t = np.asarray(_arr(teacher_logits), dtype=np.float64)
    s = nk.as_tensor(student_logits)
    if t.shape != s.shape:
        raise DimensionError(f"teacher {t.shape} and student {s.shape} logits differ in shape")
    lpt = nk.log_softmax_temp_np(t, tau)
    pt = np.exp(lpt)
    lps = nk.log_softmax_temp(s, tau)
    positions = int(np.prod(t.shape[:-1]))
    per_pos = nk.tsum(nk.mul(pt, nk.sub(lpt, lps)))
    return nk.mul(per_pos, 1.0 / positions)


def fkld(teacher: HybridModel, student: HybridModel, data, tau: float = 1.0) -> float:
    """Mean forward KL over every position of every sequence in ``data``."""
    total, count = 0.0, 0
    for seq in _as_batch(data):
        lt = teacher.forward(seq)
        ls = student.forward(seq)
        lpt = nk.log_softmax_temp_np(lt, tau)
        lps = nk.log_softmax_temp_np(ls, tau)
        total += float((np.exp(lpt) * (lpt - lps)).sum())
        count += seq.shape[0]
    return total / count


def evaluate(model: HybridModel, data, teacher: HybridModel | None = None, tau: float = 1.0) -> dict:
    out = {"cross_entropy": token_cross_entropy(model, data)}
    if teacher is not None:
        out["fkld"] = fkld(teacher, model, data, tau)
    return out


def _as_batch(data) -> list[np.ndarray]:
    if isinstance(data, np.ndarray) and data.ndim == 2:
        return list(data)
    return [np.asarray(s, dtype=np.int64) for s in data]


class BatchStream:
    """Deterministic windows of ``seq_len`` tokens drawn from a corpus.

    Each epoch visits every window once in a seed-determined order.
    """

    def __init__(self, data, batch_size: int, seq_len: int, seed: int):
        windows = []
        for seq in _as_batch(data):
            for start in range(0, len(seq) - seq_len + 1, seq_len):
                windows.append(seq[start : start + seq_len])
        if not windows:
            raise ParameterError(f"no sequence has at least seq_len={seq_len} tokens")
        self.windows = np.stack(windows).astype(np.int64)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._order.size < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(len(self.windows))])
        pick, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return self.windows[pick]


def _clip(grads: list[np.ndarray], clip_norm: float | None) -> list[np.ndarray]:
    if clip_norm is None:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > clip_norm:
        scale = clip_norm / norm
        return [g * scale for g in grads]
    return grads


def distill(
    student: HybridModel,
    teacher: HybridModel,
    data,
    cfg: KDConfig,
    *,
    lr_scale: float = 1.0,
    on_step: Callable[[int, HybridModel], None] | None = None,
) -> tuple[HybridModel, list[tuple[int, float, float]]]:
    """Plain gradient descent on the distillation loss.

    Returns the trained student (a new object) and ``(step, lr, loss)`` rows,
    one per update, the loss measured before the update.
    """
    if student.config.vocab != teacher.config.vocab:
        raise DimensionError("teacher and student vocabularies differ")
    stream = BatchStream(data, cfg.batch_size, cfg.seq_len, cfg.seed)
    current = student.copy()
    trace: list[tuple[int, float, float]] = []
    for step in range(1, cfg.total_steps + 1):
        batch = stream.next()
        lr = lr_schedule(step, cfg) * lr_scale
        t_logits = teacher.forward(batch)
        params = current.as_trainable()
        try:
            loss = kd_loss(t_logits, model_forward(params, batch), cfg.tau)
        except InputError:  # student logits overflowed
            raise DivergenceError(step, math.nan, trace) from None
        value = float(loss.item())
        if not math.isfinite(value):
            raise DivergenceError(step, value, trace)
        trace.append((step, lr, value))
        nk.backward(loss)
        named = list(params.named_parameters())
        grads = _clip([p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in named], cfg.clip_norm)
        by_name = {name: g for (name, _), g in zip(named, grads)}
        current = params.map_params(lambda name, p: p.data - lr * by_name[name])
        if on_step is not None:
            on_step(step, current)
    return current, trace


def trace_csv(trace: list[tuple[int, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "lr", "loss"])
    for step, lr, loss in trace:
        writer.writerow([step, repr(lr), repr(loss)])
    return buf.getvalue()


def next_token_loss(model: HybridModel, batch: np.ndarray) -> Tensor:
    batch = check_tokens(batch, model.config.vocab)
    if batch.ndim == 1:
        batch = batch[None, :]
    logits = model_forward(model, batch[:, :-1])
    logp = nk.log_softmax_temp(logits, 1.0)
    n, length = batch.shape[0], batch.shape[1] - 1
    flat = logp.reshape(n * length, model.config.vocab)
    picked = nk.getitem(flat, (np.arange(n * length), batch[:, 1:].reshape(-1)))
    return nk.mul(nk.tsum(picked), -1.0 / (n * length))


def train_lm(
    model: HybridModel,
    data,
    *,
    steps: int = 1000,
    lr: float = 3e-3,
    batch_size: int = 8,
    seq_len: int = 33,
    seed: int = 0,
    warmup_steps: int = 20,
    betas: tuple[float, float] = (0.9, 0.99),
    eps: float = 1e-8,
) -> tuple[HybridModel, list[tuple[int, float, float]]]:
    """Next-token pretraining with Adam and a warmup-cosine schedule.

    Used to produce teachers; the distillation loop itself stays plain
    gradient descent.
    """
    sched = KDConfig(lr_start=lr, lr_end=lr * 0.05, warmup_steps=min(warmup_steps, steps), total_steps=steps,
                     batch_size=batch_size, seq_len=seq_len, seed=seed)
    stream = BatchStream(data, batch_size, seq_len, seed)
    current = model.copy()
    names = [n for n, _ in current.named_parameters()]
    m1 = {n: np.zeros_like(_arr(v)) for n, v in current.named_parameters()}
    m2 = {n: np.zeros_like(_arr(v)) for n, v in current.named_parameters()}
    trace = []
    b1, b2 = betas
    for step in range(1, steps + 1):
        rate = lr_schedule(step, sched)
        params = current.as_trainable()
        try:
            loss = next_token_loss(params, stream.next())
        except InputError:
            raise DivergenceError(step, math.nan, trace) from None
        value = float(loss.item())
        if not math.isfinite(value):
            raise DivergenceError(step, value, trace)
        trace.append((step, rate, value))
        nk.backward(loss)
        grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data) for n, p in params.named_parameters()}

        def update(name, p):
            g = grads[name]
            m1[name] = b1 * m1[name] + (1 - b1) * g
            m2[name] = b2 * m2[name] + (1 - b2) * g * g
            mhat = m1[name] / (1 - b1**step)
            vhat = m2[name] / (1 - b2**step)
            return p.data - rate * mhat / (np.sqrt(vhat) + eps)

        current = params.map_params(update)
    return current, trace

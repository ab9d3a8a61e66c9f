"""Subjectively-inspired temporal pooling of frame quality scores.

Frame scores are pooled into a video score by blending a *memory* element
(worst score over the trailing window) with a *current* element (softmin
weighted average over the leading window) and averaging the blend over time.
Frame indices in this module are zero-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch

from .errors import DomainError

MEMORY_MODES = ("min", "mean")


@dataclass(frozen=True)
class PoolingConfig:
    tau: int = 12
    gamma: float = 0.5
    memory: str = "min"

    def __post_init__(self):
        if int(self.tau) != self.tau or self.tau < 0:
            raise DomainError(f"tau must be a non-negative integer, got {self.tau!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma!r}")
        if self.memory not in MEMORY_MODES:
            raise DomainError(f"memory must be one of {MEMORY_MODES}, got {self.memory!r}")

    def to_dict(self):
        return {"tau": int(self.tau), "gamma": float(self.gamma), "memory": self.memory}


@dataclass
class PooledQuality:
    Q: torch.Tensor
    approx_scores: torch.Tensor
    memory: torch.Tensor
    current: torch.Tensor


def _as_sequence(q) -> np.ndarray:
    arr = np.asarray(q, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError("empty score sequence")
    return arr


def _check_index(t: int, T: int):
    if not 0 <= t < T:
        raise DomainError(f"frame index {t} out of range for sequence of length {T}")


def previous_window(t: int, tau: int) -> range:
    """Trailing index set used by the memory element at frame ``t``.

    Frame 0 uses itself. With ``tau == 0`` the window degenerates to the
    single preceding frame.
    """
    if t == 0:
        return range(0, 1)
    return range(max(0, t - max(tau, 1)), t)


def next_window(t: int, tau: int, T: int) -> range:
    return range(t, min(t + tau, T - 1) + 1)


def memory_element(q: Sequence[float], t: int, tau: int, memory: str = "min") -> float:
    seq = _as_sequence(q)
    _check_index(t, seq.size)
    window = seq[list(previous_window(t, tau))]
    if memory == "min":
        return float(window.min())
    return float(window.mean())


def current_element(q: Sequence[float], t: int, tau: int) -> tuple[float, np.ndarray]:
    """Softmin-weighted score over the leading window; returns ``(m_t, weights)``."""
    seq = _as_sequence(q)
    _check_index(t, seq.size)
    window = seq[list(next_window(t, tau, seq.size))]
    # shift by the window minimum so exp never overflows
    e = np.exp(-(window - window.min()))
    weights = e / e.sum()
    return float(np.dot(weights, window)), weights


@lru_cache(maxsize=256)
def _window_indices(T: int, tau: int):
    frames = torch.arange(T).unsqueeze(1)

    width = max(tau, 1)
    prev = frames + torch.arange(-width, 0).unsqueeze(0)
    prev_valid = prev >= 0
    prev[0] = 0
    prev_valid[0] = False
    prev_valid[0, -1] = True
    prev = prev.clamp(min=0)

    nxt = frames + torch.arange(0, tau + 1).unsqueeze(0)
    next_valid = nxt < T
    nxt = nxt.clamp(max=T - 1)
    return prev, prev_valid, nxt, next_valid


def _to_tensor(q) -> torch.Tensor:
    if isinstance(q, torch.Tensor):
        return q.reshape(-1)
    return torch.as_tensor(np.asarray(q, dtype=np.float64)).reshape(-1)


def pool(q, cfg: PoolingConfig = PoolingConfig()) -> PooledQuality:
    """Hysteresis pooling of one score sequence of true length ``T``.

    Differentiable in ``q``; at ties in the trailing minimum the gradient goes
    to the earliest tied frame.
    """
    q = _to_tensor(q)
    T = q.shape[0]
    if T == 0:
        raise DomainError("cannot pool an empty score sequence")
    prev, prev_valid, nxt, next_valid = _window_indices(T, int(cfg.tau))

    # work on offsets from the sequence minimum: constant input stays exact
    qmin = q.detach().min()
    d = q - qmin

    past = d[prev]
    if cfg.memory == "min":
        masked = torch.where(prev_valid, past.detach(), torch.full_like(past, math.inf))
        lowest = masked.min(dim=1, keepdim=True).values
        # argmax returns the first maximal position, i.e. the earliest tie
        pos = ((masked == lowest) & prev_valid).to(torch.int8).argmax(dim=1, keepdim=True)
        memory = d[prev.gather(1, pos).squeeze(1)]
    else:
        valid = prev_valid.to(d.dtype)
        memory = (past * valid).sum(dim=1) / valid.sum(dim=1)

    ahead = d[nxt]
    inf = torch.full_like(ahead, math.inf)
    wmin = torch.where(next_valid, ahead.detach(), inf).min(dim=1, keepdim=True).values
    e = torch.exp(-(ahead - wmin)) * next_valid.to(d.dtype)
    weights = e / e.sum(dim=1, keepdim=True)
    current = (weights * ahead).sum(dim=1)

    approx = current + cfg.gamma * (memory - current)
    Q = qmin + approx.mean()
    return PooledQuality(Q=Q, approx_scores=qmin + approx, memory=qmin + memory, current=qmin + current)


def hysteresis_pool(q, cfg: PoolingConfig = PoolingConfig()) -> torch.Tensor:
    return pool(q, cfg).Q


def average_pool(q):
    """Plain temporal mean; returns a tensor for tensor input, else a float."""
    if isinstance(q, torch.Tensor):
        q = q.reshape(-1)
        if q.numel() == 0:
            raise DomainError("cannot pool an empty score sequence")
        qmin = q.detach().min()
        return qmin + (q - qmin).mean()
    seq = _as_sequence(q)
    lo = seq.min()
    return float(lo + (seq - lo).mean())


def pool_batch(q: torch.Tensor, lengths: Sequence[int], cfg: PoolingConfig | None) -> torch.Tensor:
    """Pool each row of a padded ``(B, T)`` batch over its true length.

    ``cfg=None`` selects plain temporal averaging.
    """
    out = []
    for row, n in zip(q, lengths):
        n = int(n)
        if n < 1:
            raise DomainError("sequence length must be at least 1")
        row = row[:n]
        out.append(average_pool(row) if cfg is None else pool(row, cfg).Q)
    return torch.stack(out)

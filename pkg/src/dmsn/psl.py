"""Pseudo subnet learning: loss memory banks, dynamic source weights, EMA aggregation.

A source whose discriminator finds it hard to tell apart from the target
(high mean domain loss) is considered more target-like and receives more
weight when its parameters are folded into the pseudo target branch.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import List, Mapping, Sequence

import numpy as np

from .exceptions import AggregationError, NumericFaultError, PreconditionError

ParamSet = Mapping[str, "np.ndarray | torch.Tensor"]  # noqa: F821


class LossMemoryBank:
    """Per-source ring buffers holding the last ``capacity`` high-level domain losses."""

    def __init__(self, num_sources: int, capacity: int = 100):
        if num_sources < 1 or capacity < 1:
            raise PreconditionError("num_sources and capacity must be positive")
        self.capacity = capacity
        self.step = 0
        self._buffers = [deque(maxlen=capacity) for _ in range(num_sources)]

    @property
    def num_sources(self) -> int:
        return len(self._buffers)

    def push(self, source: int, value: float) -> "LossMemoryBank":
        value = float(value)
        if not math.isfinite(value) or value < 0:
            raise NumericFaultError(f"rejected loss value {value} for source {source}")
        self._buffers[source].append(value)
        return self

    def values(self, source: int) -> List[float]:
        return list(self._buffers[source])

    def __len__(self) -> int:
        return min(len(b) for b in self._buffers)

    def is_full(self) -> bool:
        return all(len(b) == self.capacity for b in self._buffers)

    def mean(self, source: int) -> float:
        buf = self._buffers[source]
        if not buf:
            raise PreconditionError(f"bank for source {source} is empty")
        return float(np.mean(buf))

    def means(self) -> np.ndarray:
        """Mean per source; empty buffers report 0 so weighting falls back to uniform."""
        return np.array([float(np.mean(b)) if b else 0.0 for b in self._buffers])

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "step": self.step, "buffers": [list(b) for b in self._buffers]}

    @classmethod
    def from_state_dict(cls, state: dict) -> "LossMemoryBank":
        bank = cls(len(state["buffers"]), int(state["capacity"]))
        bank.step = int(state["step"])
        for buf, vals in zip(bank._buffers, state["buffers"]):
            buf.extend(float(v) for v in vals)
        return bank


@dataclass(frozen=True)
class SourceWeights:
    beta: np.ndarray
    fallback: bool = False

    def __iter__(self):
        return iter(self.beta)

    def __getitem__(self, i):
        return self.beta[i]

    def __len__(self):
        return len(self.beta)


def compute_beta(means) -> SourceWeights:
    """Relative similarity ``beta_i = V_i / sum_j V_j``; uniform when every mean is zero."""
    v = np.asarray(means, dtype=np.float64).reshape(-1)
    if len(v) == 0:
        raise PreconditionError("need at least one source")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise PreconditionError(f"bank means must be finite and >= 0, got {v}")
    total = v.sum()
    if total <= 0:
        return SourceWeights(np.full(len(v), 1.0 / len(v)), fallback=True)
    return SourceWeights(v / total)


def check_compatible(pseudo: ParamSet, sources: Sequence[ParamSet]):
    keys = set(pseudo)
    for i, src in enumerate(sources):
        if set(src) != keys:
            raise AggregationError(f"source {i} key set differs: {sorted(keys ^ set(src))}")
        for k in keys:
            if tuple(src[k].shape) != tuple(pseudo[k].shape):
                raise AggregationError(f"shape mismatch for {k}: {tuple(src[k].shape)} vs {tuple(pseudo[k].shape)}")


def _wide(x):
    # float64 arithmetic, so that e.g. alpha=0.99 is not rounded to float32 each step
    return x.double() if hasattr(x, "double") else np.asarray(x, dtype=np.float64)


def _narrow(x, like):
    return x.to(like.dtype) if hasattr(like, "double") else np.asarray(x).astype(np.asarray(like).dtype)


def _weighted_sum(sources: Sequence[ParamSet], beta, key):
    acc = beta[0] * _wide(sources[0][key])
    for b, src in zip(beta[1:], sources[1:]):
        acc = acc + b * _wide(src[key])
    return acc


def weighted_average(sources: Sequence[ParamSet], beta) -> dict:
    beta = [float(b) for b in beta]
    if len(beta) != len(sources):
        raise AggregationError(f"{len(beta)} weights for {len(sources)} sources")
    return {k: _narrow(_weighted_sum(sources, beta, k), sources[0][k]) for k in sources[0]}


def ema_update(pseudo: ParamSet, sources: Sequence[ParamSet], beta, alpha: float) -> dict:
    """``P_T <- alpha * P_T + (1 - alpha) * sum_i beta_i * P_Si`` for every key.

    Pure: returns a new mapping and leaves the inputs untouched. Works for
    numpy arrays and (detached) torch tensors alike.
    """
    if not 0.0 <= alpha < 1.0:
        raise PreconditionError(f"alpha must lie in [0, 1), got {alpha}")
    check_compatible(pseudo, sources)
    beta = [float(b) for b in beta]
    if len(beta) != len(sources):
        raise AggregationError(f"{len(beta)} weights for {len(sources)} sources")
    return {
        k: _narrow(alpha * _wide(pseudo[k]) + (1.0 - alpha) * _weighted_sum(sources, beta, k), pseudo[k])
        for k in pseudo
    }


def init_pseudo(sources: Sequence[ParamSet], beta) -> dict:
    """Pseudo parameters at phase-2 entry: the beta-weighted source average."""
    check_compatible(sources[0], sources)
    avg = weighted_average(sources, beta)
    return avg


def residual_norm(pseudo: ParamSet, sources: Sequence[ParamSet], beta) -> float:
    """Euclidean distance between the pseudo set and the beta-weighted source average."""
    beta = [float(b) for b in beta]
    sq = 0.0
    for k in pseudo:
        d = _wide(pseudo[k]) - _weighted_sum(sources, beta, k)
        sq += float((d * d).sum())
    return math.sqrt(sq)

"""Adversarial feature alignment: gradient reversal and the two domain discriminators.

Low-level features are aligned strongly: a per-location (M+1)-way
least-squares discriminator sees the shared trunk output. High-level
features are aligned weakly: each source branch owns a binary
source-vs-target discriminator trained with a focal loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import PreconditionError
from .structures import FeatureMap

FOCAL_EPS = 1e-6


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.scale * grad_output, None


@dataclass(frozen=True)
class GrlGate:
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise PreconditionError("GRL scale must be > 0")


def grl_apply(gate: GrlGate, fmap):
    """Identity forward, ``-scale * grad`` backward. Accepts a tensor or a :class:`FeatureMap`."""
    if isinstance(fmap, FeatureMap):
        return FeatureMap(_GradientReversal.apply(fmap.activations, gate.scale), fmap.stride)
    return _GradientReversal.apply(fmap, gate.scale)


class LowLevelDiscriminator(nn.Module):
    """Two 1x1 convolutions producing independent per-channel domain scores in (0, 1)."""

    def __init__(self, in_channels: int, num_domains: int, hidden: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, num_domains, 1)

    output_layers = ("conv2",)

    def logits(self, x):
        return self.conv2(F.leaky_relu(self.conv1(x), 0.2))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class HighLevelDiscriminator(nn.Module):
    """Global average pool, two linear layers, probability that the input is from the source."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    output_layers = ("fc2",)

    def logits(self, x):
        pooled = x.mean(dim=(2, 3))
        return self.fc2(F.leaky_relu(self.fc1(pooled), 0.2)).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def _check_unit_interval(d: torch.Tensor):
    if torch.any(d < 0) or torch.any(d > 1) or not torch.isfinite(d).all():
        raise PreconditionError("discriminator outputs must lie in [0, 1]; squash before calling")


def low_level_source_loss(d_map: torch.Tensor, source: int) -> torch.Tensor:
    """Least-squares loss for images of source ``source`` (0-based).

    ``d_map`` is ``[B, M+1, H, W]`` (or ``[M+1, H, W]``); the source's own
    channel is pushed to 1 and every other channel, including the target
    channel, to 0. Averaged over locations and images.
    """
    if d_map.dim() == 3:
        d_map = d_map.unsqueeze(0)
    _check_unit_interval(d_map)
    k = d_map.shape[1]
    if not 0 <= source < k - 1:
        raise PreconditionError(f"source index {source} outside [0, {k - 2}]")
    own = (1.0 - d_map[:, source]) ** 2
    others = (d_map**2).sum(dim=1) - d_map[:, source] ** 2
    return (own + others).mean()


def low_level_target_loss(d_map: torch.Tensor) -> torch.Tensor:
    """Least-squares loss pushing the last (target) channel to 1 at every location."""
    if d_map.dim() == 3:
        d_map = d_map.unsqueeze(0)
    _check_unit_interval(d_map)
    return ((1.0 - d_map[:, -1]) ** 2).mean()


def low_level_total_loss(source_losses: Sequence, target_loss) -> torch.Tensor:
    total = target_loss
    for loss in source_losses:
        total = total + loss
    return total


def high_level_domain_loss(d_source, d_target, gamma: float) -> torch.Tensor:
    """Focal source-vs-target loss, non-negative and minimised by the discriminator.

    ``-mean[(1 - D_s)^g log D_s] - mean[D_t^g log(1 - D_t)]``; either batch
    may be empty. Values are clamped to ``[eps, 1 - eps]`` before the log.
    """
    if gamma < 0:
        raise PreconditionError("gamma must be >= 0")
    d_source = torch.as_tensor(d_source, dtype=torch.float64 if not torch.is_tensor(d_source) else None).reshape(-1)
    d_target = torch.as_tensor(d_target, dtype=d_source.dtype).reshape(-1)
    _check_unit_interval(d_source)
    _check_unit_interval(d_target)
    total = d_source.new_zeros(())
    if d_source.numel():
        ds = d_source.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
        total = total - ((1.0 - ds) ** gamma * torch.log(ds)).mean()
    if d_target.numel():
        dt = d_target.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
        total = total - (dt**gamma * torch.log(1.0 - dt)).mean()
    return total


def domain_posterior(d_map: torch.Tensor) -> torch.Tensor:
    """Per-location domain posterior implied by the least-squares optima.

    The target channel is trained against every domain, so it estimates
    ``P(T | x)``. Source channel ``i`` only sees source images, so it estimates
    ``P(S_i | x, not T)``. Combining the two gives a distribution over all
    ``M + 1`` domains, shape ``[B, M+1, H, W]``.
    """
    if d_map.dim() == 3:
        d_map = d_map.unsqueeze(0)
    p_t = d_map[:, -1:]
    src = d_map[:, :-1]
    share = src / src.sum(dim=1, keepdim=True).clamp_min(1e-12)
    return torch.cat([(1.0 - p_t) * share, p_t], dim=1)


def domain_predictions(d_map: torch.Tensor, rule: str = "posterior") -> torch.Tensor:
    """Per-location predicted domain index from a ``[B, M+1, H, W]`` map.

    ``"posterior"`` takes the argmax of :func:`domain_posterior`; ``"argmax"``
    takes the largest raw channel.
    """
    if d_map.dim() == 3:
        d_map = d_map.unsqueeze(0)
    if rule == "argmax":
        return d_map.argmax(dim=1)
    if rule != "posterior":
        raise PreconditionError(f"unknown rule {rule!r}")
    return domain_posterior(d_map).argmax(dim=1)


def domain_accuracy(d_map: torch.Tensor, domain: int, rule: str = "posterior") -> float:
    """Fraction of locations predicted as ``domain``."""
    return float((domain_predictions(d_map, rule) == domain).double().mean())

"""Rank consistency between the pseudo branch's proposals and each source branch's.

Every pseudo proposal is matched to its highest-IoU proposal in a source
set; the loss weights the rank gap of each match by its IoU. Ranks and
argmaxes are discrete, so training uses a surrogate on the matched pairs'
squashed objectness scores while the discrete value is reported.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .boxes import iou, iou_matrix
from .exceptions import PreconditionError
from .structures import ProposalSet

__all__ = ["iou", "MatchResult", "match_proposals", "consistency_loss", "consistency_surrogate"]


@dataclass
class MatchResult:
    """For each pseudo proposal ``n`` (row order): best IoU and 1-based rank of the match."""

    best_iou: np.ndarray
    matched_rank: np.ndarray

    @property
    def matched_index(self) -> np.ndarray:
        return self.matched_rank - 1


def match_proposals(source_set: ProposalSet, pseudo_set: ProposalSet) -> MatchResult:
    if len(source_set) != len(pseudo_set):
        raise PreconditionError(f"proposal sets differ in size: {len(source_set)} vs {len(pseudo_set)}")
    if len(pseudo_set) == 0:
        raise PreconditionError("proposal sets are empty")
    # rows: pseudo proposals, columns: source proposals; argmax keeps the lowest rank on ties
    overlaps = iou_matrix(pseudo_set.boxes, source_set.boxes)
    j = overlaps.argmax(axis=1)
    return MatchResult(overlaps[np.arange(len(j)), j], j + 1)


def consistency_loss(source_sets: Sequence[ProposalSet], pseudo_set: ProposalSet) -> float:
    """Discrete value ``(1/N) sum_n sum_i O_n^i |n*_i - n|``."""
    n = len(pseudo_set)
    ranks = np.arange(1, n + 1)
    total = 0.0
    for src in source_sets:
        m = match_proposals(src, pseudo_set)
        total += float(np.sum(m.best_iou * np.abs(m.matched_rank - ranks)))
    return total / n


def consistency_surrogate(
    source_logits: Sequence[torch.Tensor],
    source_sets: Sequence[ProposalSet],
    pseudo_set: ProposalSet,
    matches: Sequence[MatchResult] | None = None,
) -> torch.Tensor:
    """Differentiable stand-in used for training.

    With matches frozen, penalises ``O_n^i * |sigmoid(s^i_{n*}) - sigmoid(s^T_n)|``
    averaged over the N pseudo proposals. ``source_logits[i]`` holds the
    per-anchor objectness logits of source branch ``i`` (with gradient);
    pseudo scores are constants.
    """
    if matches is None:
        matches = [match_proposals(s, pseudo_set) for s in source_sets]
    n = len(pseudo_set)
    target = torch.sigmoid(torch.as_tensor(pseudo_set.objectness, dtype=source_logits[0].dtype))
    total = source_logits[0].new_zeros(())
    for logits, src, m in zip(source_logits, source_sets, matches):
        if src.anchor_index is None:
            raise PreconditionError("source proposals carry no anchor indices")
        anchor = torch.from_numpy(src.anchor_index[m.matched_index])
        weight = torch.as_tensor(m.best_iou, dtype=logits.dtype)
        total = total + (weight * (torch.sigmoid(logits[anchor]) - target).abs()).sum()
    return total / n


def mean_overlap(matches: Sequence[MatchResult]) -> float:
    return float(np.mean([m.best_iou.mean() for m in matches])) if matches else 0.0

"""Minimal two-stage detector with a shared low-level trunk and M+1 branches.

Layout::

    image -> G1 (3 convs, stride 4) -+-> branch 0: G2 -> RPN -> ROI head
                                     +-> ...
                                     +-> branch M (pseudo target subnet)

Every branch has the same architecture, which is what allows their
parameters to be averaged into the pseudo branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import clip_boxes, decode, encode, iou_matrix, nms
from .exceptions import NumericFaultError, PreconditionError, ShapeError, UnknownBranchError
from .structures import BoxAnnotation, Detection, FeatureMap, ImageSample, ProposalSet

LOW_STRIDE = 4
HIGH_STRIDE = 8
ANCHOR_SCALES = (8.0, 16.0, 32.0)
ROI_SIZE = 4
LOW_CHANNELS = 32
HIGH_CHANNELS = 64

RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3
RPN_BATCH = 64
RPN_POS_FRACTION = 0.5
RPN_NMS = 0.7
ROI_POS_IOU = 0.5
ROI_BATCH = 64
ROI_POS_FRACTION = 0.25
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
RPN_SMOOTH_L1_BETA = 1.0 / 9.0
ROI_SMOOTH_L1_BETA = 1.0


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


class LowExtractor(nn.Module):
    def __init__(self):
        super().__init__()
        self.body = nn.Sequential(
            _conv(3, 16), nn.ReLU(),
            _conv(16, LOW_CHANNELS, 2), nn.ReLU(),
            _conv(LOW_CHANNELS, LOW_CHANNELS, 2), nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


class Branch(nn.Module):
    """One subnet: second-stage extractor, RPN and ROI head."""

    def __init__(self, num_classes: int, num_anchors: int = len(ANCHOR_SCALES)):
        super().__init__()
        self.g2 = nn.Sequential(
            _conv(LOW_CHANNELS, HIGH_CHANNELS, 2), nn.ReLU(),
            _conv(HIGH_CHANNELS, HIGH_CHANNELS), nn.ReLU(),
            _conv(HIGH_CHANNELS, HIGH_CHANNELS), nn.ReLU(),
        )
        self.rpn = nn.ModuleDict(
            {
                "conv": _conv(HIGH_CHANNELS, HIGH_CHANNELS),
                "cls": nn.Conv2d(HIGH_CHANNELS, num_anchors, 1),
                "reg": nn.Conv2d(HIGH_CHANNELS, 4 * num_anchors, 1),
            }
        )
        hidden = 128
        self.roi = nn.ModuleDict(
            {
                "fc1": nn.Linear(HIGH_CHANNELS * ROI_SIZE * ROI_SIZE, hidden),
                "fc2": nn.Linear(hidden, hidden),
                "cls": nn.Linear(hidden, num_classes + 1),
                "reg": nn.Linear(hidden, 4 * (num_classes + 1)),
            }
        )


_HEAD_LAYERS = {"rpn.cls", "rpn.reg", "roi.cls", "roi.reg"}


def init_uniform_fan_in(module: nn.Module, generator: torch.Generator, heads=_HEAD_LAYERS):
    """Uniform fan-in initialisation: He bound for hidden layers, small bound for output heads."""
    for name, sub in module.named_modules():
        if not isinstance(sub, (nn.Conv2d, nn.Linear)):
            continue
        fan_in = sub.weight[0].numel()
        head = any(name.endswith(h) for h in heads)
        bound = (0.1 * np.sqrt(3.0 / fan_in)) if head else np.sqrt(6.0 / fan_in)
        with torch.no_grad():
            sub.weight.copy_(torch.rand(sub.weight.shape, generator=generator) * 2 * bound - bound)
            sub.bias.zero_()


@dataclass
class RoiOutputs:
    class_logits: torch.Tensor
    class_scores: torch.Tensor
    box_deltas: torch.Tensor


@dataclass
class BranchOutputs:
    """Per-image outputs of one branch."""

    branch_id: int
    proposals: ProposalSet
    anchors: torch.Tensor
    rpn_logits: torch.Tensor
    rpn_deltas: torch.Tensor
    high_feature: FeatureMap
    rois: Optional[torch.Tensor] = None
    class_logits: Optional[torch.Tensor] = None
    class_scores: Optional[torch.Tensor] = None
    box_deltas: Optional[torch.Tensor] = None
    image_size: tuple = (64, 64)


@dataclass
class DetectionLoss:
    total: torch.Tensor
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    rcnn_cls: torch.Tensor
    rcnn_reg: torch.Tensor
    sampled_anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    anchor_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    roi_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def components(self) -> Dict[str, float]:
        return {
            "rpn_cls": float(self.rpn_cls.detach()),
            "rpn_reg": float(self.rpn_reg.detach()),
            "rcnn_cls": float(self.rcnn_cls.detach()),
            "rcnn_reg": float(self.rcnn_reg.detach()),
        }


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack ``ImageSample``s (or HxWx3 arrays) into a ``[B, 3, H, W]`` tensor."""
    if isinstance(images, torch.Tensor):
        return images
    arrays = [im.pixels if isinstance(im, ImageSample) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrays).astype(np.float32)).permute(0, 3, 1, 2).to(dtype).contiguous()


def _annotation_arrays(annotations):
    if annotations is None:
        return np.zeros((0, 4)), np.zeros((0,), dtype=np.int64)
    if isinstance(annotations, tuple):
        boxes, labels = annotations
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64)
    if not annotations:
        return np.zeros((0, 4)), np.zeros((0,), dtype=np.int64)
    boxes = np.array([a.box for a in annotations], dtype=np.float64)
    labels = np.array([a.class_id for a in annotations], dtype=np.int64)
    return boxes, labels


class SpindleDetector(nn.Module):
    """Shared trunk ``g1`` plus ``num_branches`` structurally identical branches.

    With ``num_sources=M`` and ``with_pseudo=True`` there are M+1 branches
    and branch ``M`` is the pseudo target subnet.
    """

    def __init__(
        self,
        num_classes: int,
        num_sources: int,
        with_pseudo: bool = True,
        image_size=(64, 64),
        seed: int = 0,
        branch_init: str = "shared",
    ):
        super().__init__()
        if num_classes < 1 or num_sources < 1:
            raise PreconditionError("need at least one class and one source")
        if branch_init not in ("shared", "independent"):
            raise PreconditionError(f"unknown branch_init {branch_init!r}")
        self.num_classes = num_classes
        self.num_sources = num_sources
        self.with_pseudo = with_pseudo
        self.image_size = tuple(int(v) for v in image_size)
        self.anchor_scales = ANCHOR_SCALES
        self.g1 = LowExtractor()
        n = num_sources + (1 if with_pseudo else 0)
        self.branches = nn.ModuleList([Branch(num_classes) for _ in range(n)])
        gen = torch.Generator().manual_seed(seed)
        init_uniform_fan_in(self.g1, gen)
        init_uniform_fan_in(self.branches[0], gen)
        for b in self.branches[1:]:
            if branch_init == "shared":
                b.load_state_dict(self.branches[0].state_dict())
            else:
                init_uniform_fan_in(b, gen)
        self._anchor_cache: Dict[tuple, torch.Tensor] = {}

    @property
    def pseudo_id(self) -> Optional[int]:
        return self.num_sources if self.with_pseudo else None

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    def branch(self, branch_id: int) -> Branch:
        if not isinstance(branch_id, (int, np.integer)) or not 0 <= branch_id < len(self.branches):
            raise UnknownBranchError(f"branch {branch_id} not in [0, {len(self.branches) - 1}]")
        return self.branches[int(branch_id)]

    @property
    def dtype(self):
        return self.g1.body[0].weight.dtype

    # -- feature extraction -------------------------------------------------

    def extract_low(self, images) -> FeatureMap:
        x = images_to_tensor(images, self.dtype)
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.image_size:
            raise PreconditionError(f"expected [B, 3, {self.image_size[0]}, {self.image_size[1]}], got {tuple(x.shape)}")
        if torch.any(x < 0) or torch.any(x > 1):
            raise PreconditionError("pixel values must lie in [0, 1]")
        out = self.g1(x)
        if not torch.isfinite(out).all():
            raise NumericFaultError("non-finite low-level activations")
        return FeatureMap(out, LOW_STRIDE)

    def extract_high(self, branch_id: int, fmap: FeatureMap) -> FeatureMap:
        return FeatureMap(self.branch(branch_id).g2(fmap.activations), HIGH_STRIDE)

    # -- RPN ----------------------------------------------------------------

    def anchors(self, height: int, width: int) -> torch.Tensor:
        """Anchors ``[H*W*S, 4]`` ordered by row, column, scale."""
        key = (height, width, self.dtype)
        if key not in self._anchor_cache:
            ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
            cx = (xs + 0.5) * HIGH_STRIDE
            cy = (ys + 0.5) * HIGH_STRIDE
            half = np.asarray(self.anchor_scales) / 2.0
            a = np.stack(
                [
                    cx[..., None] - half,
                    cy[..., None] - half,
                    cx[..., None] + half,
                    cy[..., None] + half,
                ],
                axis=-1,
            ).reshape(-1, 4)
            self._anchor_cache[key] = torch.from_numpy(a).to(self.dtype)
        return self._anchor_cache[key]

    def rpn_head(self, branch_id: int, high: FeatureMap):
        """Objectness logits ``[B, A]`` and anchor deltas ``[B, A, 4]``."""
        rpn = self.branch(branch_id).rpn
        x = high.activations
        if x.shape[-1] < 1 or x.shape[-2] < 1:
            raise ShapeError(f"feature map {tuple(x.shape)} has no anchor cell")
        h = F.relu(rpn["conv"](x))
        b, _, fh, fw = x.shape
        s = len(self.anchor_scales)
        logits = rpn["cls"](h).permute(0, 2, 3, 1).reshape(b, fh * fw * s)
        deltas = rpn["reg"](h).view(b, s, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(b, fh * fw * s, 4)
        return logits, deltas

    def select_proposals(self, logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor, n_keep: int) -> ProposalSet:
        """Decode, clip, NMS and rank one image's anchors into exactly ``n_keep`` proposals."""
        if n_keep < 1:
            raise PreconditionError("n_keep must be >= 1")
        with torch.no_grad():
            boxes = clip_boxes(decode(deltas, anchors), *self.image_size).double().numpy()
            scores = logits.double().numpy()
        wh = boxes[:, 2:] - boxes[:, :2]
        valid = np.flatnonzero((wh >= 1.0).all(axis=1))
        if len(valid) == 0:
            valid = np.array([int(np.argmax(scores))])
            boxes = boxes.copy()
            boxes[valid] = clip_boxes(anchors[valid], *self.image_size).double().numpy()
        order = valid[np.argsort(-scores[valid], kind="stable")]
        kept = order[nms(boxes[order], scores[order], RPN_NMS)][:n_keep]
        n_unique = len(kept)
        if n_unique < n_keep:
            kept = np.concatenate([kept, np.full(n_keep - n_unique, kept[-1])])
        return ProposalSet(boxes[kept], scores[kept], anchor_index=kept, n_unique=n_unique)

    def rpn_forward(self, branch_id: int, high: FeatureMap, n_keep: int) -> List[ProposalSet]:
        logits, deltas = self.rpn_head(branch_id, high)
        anchors = self.anchors(*high.activations.shape[-2:])
        return [self.select_proposals(logits[i], deltas[i], anchors, n_keep) for i in range(len(logits))]

    # -- ROI head -----------------------------------------------------------

    def roi_pool(self, high: FeatureMap, rois: Sequence[torch.Tensor]) -> torch.Tensor:
        """Bilinear ROI pooling to ``ROI_SIZE x ROI_SIZE`` (2x2 samples per bin, averaged)."""
        feats = high.activations
        _, _, fh, fw = feats.shape
        batch_idx = torch.cat([torch.full((len(r),), i, dtype=torch.long) for i, r in enumerate(rois)])
        boxes = torch.cat([r.to(feats.dtype) for r in rois]).reshape(-1, 4)
        k = 2 * ROI_SIZE
        steps = (torch.arange(k, dtype=feats.dtype) + 0.5) / k
        xs = boxes[:, 0:1] + steps[None] * (boxes[:, 2:3] - boxes[:, 0:1])
        ys = boxes[:, 1:2] + steps[None] * (boxes[:, 3:4] - boxes[:, 1:2])
        gx = 2.0 * xs / (fw * high.stride) - 1.0
        gy = 2.0 * ys / (fh * high.stride) - 1.0
        grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
        sampled = F.grid_sample(feats[batch_idx], grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        return F.avg_pool2d(sampled, 2)

    def roi_head(self, branch_id: int, high: FeatureMap, rois: Sequence[torch.Tensor]) -> RoiOutputs:
        """Class probabilities over C+1 classes (index 0 = background) and per-class deltas."""
        roi = self.branch(branch_id).roi
        rois = [torch.as_tensor(r, dtype=self.dtype).reshape(-1, 4) for r in rois]
        if sum(len(r) for r in rois) == 0:
            raise PreconditionError("roi_head needs at least one proposal")
        x = self.roi_pool(high, rois).flatten(1)
        x = F.relu(roi["fc1"](x))
        x = F.relu(roi["fc2"](x))
        logits = roi["cls"](x)
        deltas = roi["reg"](x).view(len(x), self.num_classes + 1, 4)
        boxes = torch.cat(rois)
        degenerate = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) < 1.0
        scores = F.softmax(logits, dim=1)
        if degenerate.any():
            bg = torch.zeros_like(scores)
            bg[:, 0] = 1.0
            scores = torch.where(degenerate[:, None], bg, scores)
            deltas = torch.where(degenerate[:, None, None], torch.zeros_like(deltas), deltas)
        return RoiOutputs(logits, scores, deltas)

    # -- training / inference passes --------------------------------------

    def sample_rois(self, proposals: ProposalSet, annotations, rng: np.random.Generator) -> np.ndarray:
        """Training ROIs: unique proposals plus ground truth, subsampled to a fixed budget."""
        gt_boxes, _ = _annotation_arrays(annotations)
        cand = np.concatenate([proposals.boxes[: proposals.n_unique], gt_boxes])
        if len(gt_boxes):
            best = iou_matrix(cand, gt_boxes).max(axis=1)
        else:
            best = np.zeros(len(cand))
        pos = np.flatnonzero(best >= ROI_POS_IOU)
        neg = np.flatnonzero(best < ROI_POS_IOU)
        n_pos = min(len(pos), int(ROI_BATCH * ROI_POS_FRACTION))
        n_neg = min(len(neg), ROI_BATCH - n_pos)
        pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
        neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
        return cand[np.sort(np.concatenate([pos, neg]).astype(np.int64))]

    def forward_branch(
        self,
        branch_id: int,
        low: FeatureMap,
        annotations: Optional[Sequence] = None,
        rng: Optional[np.random.Generator] = None,
        n_keep: int = 256,
        rois: Optional[Sequence] = None,
    ) -> List[BranchOutputs]:
        """Run one branch on a batch of low-level features.

        With ``annotations`` (one list per image) training ROIs are sampled
        with ``rng`` and the ROI head is evaluated on them. Explicit ``rois``
        bypass sampling, which keeps a loss evaluation reproducible.
        """
        high = self.extract_high(branch_id, low)
        logits, deltas = self.rpn_head(branch_id, high)
        fh, fw = high.activations.shape[-2:]
        anchors = self.anchors(fh, fw)
        outs = []
        for i in range(len(logits)):
            props = self.select_proposals(logits[i], deltas[i], anchors, n_keep)
            outs.append(
                BranchOutputs(
                    branch_id=branch_id,
                    proposals=props,
                    anchors=anchors,
                    rpn_logits=logits[i],
                    rpn_deltas=deltas[i],
                    high_feature=FeatureMap(high.activations[i : i + 1], high.stride),
                    image_size=self.image_size,
                )
            )
        if rois is None and annotations is not None:
            rng = rng if rng is not None else np.random.default_rng(0)
            rois = [self.sample_rois(o.proposals, a, rng) for o, a in zip(outs, annotations)]
        if rois is not None:
            rois = [torch.as_tensor(np.asarray(r), dtype=self.dtype).reshape(-1, 4) for r in rois]
            head = self.roi_head(branch_id, high, rois)
            start = 0
            for o, r in zip(outs, rois):
                sl = slice(start, start + len(r))
                o.rois = r
                o.class_logits = head.class_logits[sl]
                o.class_scores = head.class_scores[sl]
                o.box_deltas = head.box_deltas[sl]
                start += len(r)
        return outs

    @torch.no_grad()
    def detect(
        self,
        branch_id: int,
        high: FeatureMap,
        n_keep: int = 256,
        score_threshold: float = 0.05,
        nms_threshold: float = 0.5,
        max_detections: int = 100,
    ) -> List[List[Detection]]:
        props = self.rpn_forward(branch_id, high, n_keep)
        rois = [torch.from_numpy(p.boxes[: p.n_unique]).to(self.dtype) for p in props]
        head = self.roi_head(branch_id, high, rois)
        results, start = [], 0
        for r in rois:
            sl = slice(start, start + len(r))
            start += len(r)
            scores = head.class_scores[sl, 1:]
            boxes = clip_boxes(
                decode(head.box_deltas[sl, 1:], r[:, None, :].expand(-1, self.num_classes, -1), ROI_BOX_WEIGHTS),
                *self.image_size,
            )
            roi_idx, cls = torch.nonzero(scores > score_threshold, as_tuple=True)
            b = boxes[roi_idx, cls].double().numpy()
            s = scores[roi_idx, cls].double().numpy()
            c = cls.numpy()
            ok = ((b[:, 2] - b[:, 0]) > 0) & ((b[:, 3] - b[:, 1]) > 0)
            b, s, c = b[ok], s[ok], c[ok]
            keep = []
            for k in np.unique(c):
                idx = np.flatnonzero(c == k)
                keep.extend(idx[nms(b[idx], s[idx], nms_threshold)])
            keep = np.asarray(keep, dtype=np.int64)
            keep = keep[np.lexsort((keep, -s[keep]))][:max_detections] if len(keep) else keep
            results.append(
                [Detection(tuple(float(v) for v in b[k]), int(c[k]), float(s[k]), branch_id) for k in keep]
            )
        return results

    # -- parameter views ----------------------------------------------------

    def branch_params(self, branch_id: int) -> Dict[str, torch.Tensor]:
        return dict(self.branch(branch_id).named_parameters())

    def param_arrays(self) -> Dict[str, np.ndarray]:
        """Checkpoint view: ``g1/*`` and ``branch<i>/{g2,rpn,roi}/*``."""
        out = {}
        for name, p in self.g1.named_parameters():
            out["g1/" + name.replace(".", "/")] = p.detach().cpu().numpy().copy()
        for i, b in enumerate(self.branches):
            for name, p in b.named_parameters():
                out[f"branch{i}/" + name.replace(".", "/")] = p.detach().cpu().numpy().copy()
        return out

    def load_param_arrays(self, arrays: Dict[str, np.ndarray]):
        with torch.no_grad():
            for name, p in self.g1.named_parameters():
                p.copy_(torch.from_numpy(arrays["g1/" + name.replace(".", "/")]))
            for i, b in enumerate(self.branches):
                for name, p in b.named_parameters():
                    p.copy_(torch.from_numpy(arrays[f"branch{i}/" + name.replace(".", "/")]))

    def metadata(self) -> dict:
        return {
            "num_sources": self.num_sources,
            "num_classes": self.num_classes,
            "with_pseudo": self.with_pseudo,
            "image_size": list(self.image_size),
            "anchor_scales": list(self.anchor_scales),
            "anchor_stride": HIGH_STRIDE,
        }


def _anchor_targets(anchors: np.ndarray, gt_boxes: np.ndarray):
    """Anchor labels (1 fg, 0 bg, -1 ignore) and the matched GT index per anchor."""
    labels = -np.ones(len(anchors), dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ious = iou_matrix(anchors, gt_boxes)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels[best < RPN_NEG_IOU] = 0
    labels[best >= RPN_POS_IOU] = 1
    # every GT keeps its best-overlapping anchor(s), as in the standard assignment
    per_gt_best = ious.max(axis=0)
    for g in range(len(gt_boxes)):
        if per_gt_best[g] > 0:
            hits = np.flatnonzero(ious[:, g] == per_gt_best[g])
            labels[hits] = 1
            matched[hits] = g
    return labels, matched


def detection_loss(outputs: BranchOutputs, annotations, rng: np.random.Generator) -> DetectionLoss:
    """RPN + RCNN classification and smooth-L1 regression losses for one labeled image.

    Anchors are subsampled with ``rng``; the ROIs in ``outputs`` are labeled
    as given (they were sampled by :meth:`SpindleDetector.forward_branch`).
    """
    if outputs.rois is None:
        raise PreconditionError("outputs carry no ROI head results")
    gt_boxes, gt_labels = _annotation_arrays(annotations)
    dtype = outputs.rpn_logits.dtype
    anchors = outputs.anchors.double().numpy()

    labels, matched = _anchor_targets(anchors, gt_boxes)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(RPN_BATCH * RPN_POS_FRACTION))
    n_neg = min(len(neg), RPN_BATCH - n_pos)
    pos = np.sort(rng.choice(pos, n_pos, replace=False)) if n_pos < len(pos) else pos
    neg = np.sort(rng.choice(neg, n_neg, replace=False)) if n_neg < len(neg) else neg
    sampled = np.concatenate([pos, neg])
    sampled_labels = labels[sampled]
    idx = torch.from_numpy(sampled)
    rpn_cls = F.binary_cross_entropy_with_logits(
        outputs.rpn_logits[idx], torch.from_numpy(sampled_labels).to(dtype), reduction="mean"
    )
    if len(pos):
        p = torch.from_numpy(pos)
        target = encode(torch.from_numpy(gt_boxes[matched[pos]]).to(dtype), outputs.anchors[p])
        rpn_reg = F.smooth_l1_loss(outputs.rpn_deltas[p], target, beta=RPN_SMOOTH_L1_BETA, reduction="sum") / len(sampled)
    else:
        rpn_reg = outputs.rpn_logits.new_zeros(())

    rois = outputs.rois.double().numpy()
    if len(gt_boxes):
        ious = iou_matrix(rois, gt_boxes)
        best, arg = ious.max(axis=1), ious.argmax(axis=1)
        roi_labels = np.where(best >= ROI_POS_IOU, gt_labels[arg] + 1, 0)
    else:
        arg = np.zeros(len(rois), dtype=np.int64)
        roi_labels = np.zeros(len(rois), dtype=np.int64)
    rcnn_cls = F.cross_entropy(outputs.class_logits, torch.from_numpy(roi_labels), reduction="mean")
    fg = np.flatnonzero(roi_labels > 0)
    if len(fg):
        f = torch.from_numpy(fg)
        target = encode(torch.from_numpy(gt_boxes[arg[fg]]).to(dtype), outputs.rois[f], ROI_BOX_WEIGHTS)
        pred = outputs.box_deltas[f, torch.from_numpy(roi_labels[fg])]
        rcnn_reg = F.smooth_l1_loss(pred, target, beta=ROI_SMOOTH_L1_BETA, reduction="sum") / len(rois)
    else:
        rcnn_reg = outputs.rpn_logits.new_zeros(())
    total = rpn_cls + rpn_reg + rcnn_cls + rcnn_reg
    return DetectionLoss(total, rpn_cls, rpn_reg, rcnn_cls, rcnn_reg, sampled, sampled_labels, roi_labels)

"""Cross-subnet fusion at inference and VOC-style AP / mAP scoring."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .boxes import iou_matrix
from .detector import SpindleDetector
from .exceptions import ConfigurationError, PreconditionError
from .structures import BoxAnnotation, Detection, ImageSample
from .trainer import TrainConfig


def _ordered(detections: Sequence[Detection]):
    """Indices ordered by descending score, then subnet id, then original position."""
    return sorted(range(len(detections)), key=lambda i: (-detections[i].score, detections[i].subnet_id, i))


def fuse_predictions(
    per_subnet: Sequence[Sequence[Detection]],
    iou_threshold: float = 0.5,
    mode: str = "nms",
    weights: Optional[Sequence[float]] = None,
) -> List[Detection]:
    """Merge one image's detections from several subnets.

    ``mode="nms"`` keeps the union after class-wise greedy NMS. ``mode="average"``
    keeps the same boxes but scores each by the mean, over subnets, of the best
    score that subnet contributed to the suppressed cluster (0 if none).
    ``weights`` rescales each subnet's scores before merging.
    """
    if mode not in ("nms", "average"):
        raise PreconditionError(f"unknown fusion mode {mode!r}")
    dets: List[Detection] = []
    for s, subnet in enumerate(per_subnet):
        w = 1.0 if weights is None else float(weights[s])
        for d in subnet:
            x1, y1, x2, y2 = d.box
            if not (x2 > x1 and y2 > y1):
                raise PreconditionError(f"malformed box {d.box}")
            dets.append(Detection(d.box, d.class_id, d.score * w, d.subnet_id) if w != 1.0 else d)
    if not dets:
        return []
    order = _ordered(dets)
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(dets), dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        cluster = (classes == classes[i]) & ~suppressed & (overlaps[i] > iou_threshold)
        cluster[i] = True
        suppressed |= cluster
        if mode == "nms":
            kept.append(dets[i])
        else:
            n_subnets = len(per_subnet)
            best = {}
            for j in np.flatnonzero(cluster):
                best[dets[j].subnet_id] = max(best.get(dets[j].subnet_id, 0.0), dets[j].score)
            kept.append(Detection(dets[i].box, dets[i].class_id, sum(best.values()) / n_subnets, dets[i].subnet_id))
    return kept


def precision_recall(detections, ground_truth, class_id: int, iou_match_threshold: float = 0.5):
    """Cumulative ``(precision, recall, n_gt)`` over score-ranked detections of one class.

    ``detections`` and ``ground_truth`` are per-image lists. Matching is
    greedy and one-to-one: a detection is a true positive when its best
    same-class GT overlaps at least ``iou_match_threshold`` and is unclaimed.
    """
    if len(detections) != len(ground_truth):
        raise PreconditionError("detections and ground truth cover different image counts")
    gts = []
    n_gt = 0
    for anns in ground_truth:
        boxes = np.array([a.box for a in anns if a.class_id == class_id], dtype=np.float64).reshape(-1, 4)
        gts.append(boxes)
        n_gt += len(boxes)
    records = [
        (d.score, img, k, d.box)
        for img, dets in enumerate(detections)
        for k, d in enumerate(dets)
        if d.class_id == class_id
    ]
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    claimed = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(records))
    for r, (_, img, _, box) in enumerate(records):
        if len(gts[img]) == 0:
            continue
        ious = iou_matrix([box], gts[img])[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_match_threshold and not claimed[img][j]:
            claimed[img][j] = True
            tp[r] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return precision, recall, n_gt


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the all-points interpolated precision-recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def compute_ap(detections, ground_truth, class_id: int, iou_match_threshold: float = 0.5) -> Optional[float]:
    """AP for one class, or ``None`` when the class has no ground truth."""
    precision, recall, n_gt = precision_recall(detections, ground_truth, class_id, iou_match_threshold)
    if n_gt == 0:
        return None
    return average_precision(precision, recall)


def mean_ap(detections, ground_truth, num_classes: int, include_empty_classes: bool = False) -> float:
    aps = [compute_ap(detections, ground_truth, c) for c in range(num_classes)]
    if include_empty_classes:
        aps = [0.0 if a is None else a for a in aps]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class EvalReport:
    per_class_ap: Dict[str, Optional[float]]
    map: float
    per_subnet_map: Dict[str, float]
    n_images: int
    n_gt: int
    gt_per_class: Dict[str, int]
    config_fingerprint: str
    pr_curves: Dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def load_detector(path):
    """Rebuild the detector stored in a checkpoint; returns ``(model, metadata)``."""
    arrays, meta = ckpt.load_archive(path)
    m = meta["model"]
    model = SpindleDetector(m["num_classes"], m["num_sources"], with_pseudo=m["with_pseudo"], image_size=tuple(m["image_size"]))
    model.load_param_arrays(arrays)
    model.eval()
    return model, meta


def active_branches(model: SpindleDetector, meta: dict) -> List[int]:
    """Source branches plus the pseudo branch once it has been aggregated."""
    ids = list(range(model.num_sources))
    if model.with_pseudo and meta.get("state", {}).get("pseudo_initialized", False):
        ids.append(model.pseudo_id)
    return ids


def fusion_weights(model: SpindleDetector, branches: Sequence[int], beta: Sequence[float]) -> List[float]:
    top = max(beta) if len(beta) else 1.0
    return [float(beta[b]) / top if b < model.num_sources else 1.0 for b in branches]


@torch.no_grad()
def predict(
    model: SpindleDetector,
    images: Sequence[ImageSample],
    branches: Sequence[int],
    n_keep: int = 256,
    fusion: str = "nms",
    fusion_iou: float = 0.5,
    weights: Optional[Sequence[float]] = None,
    batch_size: int = 32,
):
    """Run the trunk once per image and every listed branch on the shared features.

    Returns ``(fused, per_branch)``: fused detections per image, and for each
    branch its own detections per image.
    """
    model.eval()
    per_branch = {b: [] for b in branches}
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        low = model.extract_low(chunk)
        for b in branches:
            per_branch[b].extend(model.detect(b, model.extract_high(b, low), n_keep))
    fused = [
        fuse_predictions([per_branch[b][i] for b in branches], fusion_iou, fusion, weights)
        for i in range(len(images))
    ]
    return fused, per_branch


def _split_images(dataset_split, target_domain: int) -> List[ImageSample]:
    if isinstance(dataset_split, (list, tuple)):
        return list(dataset_split)
    if target_domain not in dataset_split:
        raise ConfigurationError(f"split has no domain {target_domain}")
    return list(dataset_split[target_domain])


def evaluate(checkpoint, dataset_split, config: Optional[TrainConfig] = None) -> EvalReport:
    """Score a checkpoint on the target images of a split with withheld ground truth."""
    model, meta = load_detector(checkpoint)
    cfg = config if config is not None else TrainConfig.from_dict(meta["config"])
    classes = list(meta.get("classes") or [str(c) for c in range(model.num_classes)])
    split_classes = getattr(dataset_split, "classes", None)
    if split_classes is not None and len(split_classes) != model.num_classes:
        raise ConfigurationError(
            f"checkpoint has {model.num_classes} classes but the split has {len(split_classes)}"
        )
    if len(classes) != model.num_classes:
        raise ConfigurationError("checkpoint class names disagree with its class count")
    images = _split_images(dataset_split, cfg.target_domain)
    gt = [im.boxes for im in images]
    if any(a.class_id >= model.num_classes for anns in gt for a in anns):
        raise ConfigurationError("split contains class ids beyond the checkpoint's class count")
    branches = active_branches(model, meta)
    weights = None
    if cfg.beta_weighted_fusion:
        weights = fusion_weights(model, branches, meta["state"]["beta"])
    fused, per_branch = predict(model, images, branches, cfg.n_proposals, cfg.fusion, cfg.fusion_iou, weights)

    per_class, curves, gt_counts = {}, {}, {}
    for c, name in enumerate(classes):
        precision, recall, n_gt = precision_recall(fused, gt, c)
        gt_counts[name] = n_gt
        if n_gt == 0:
            per_class[name] = 0.0 if cfg.include_empty_classes else None
            continue
        per_class[name] = average_precision(precision, recall)
        curves[name] = {"precision": precision.tolist(), "recall": recall.tolist()}
    scored = [a for a in per_class.values() if a is not None]
    subnet_map = {
        ("pseudo" if b == model.pseudo_id else f"source{b}"): mean_ap(
            per_branch[b], gt, model.num_classes, cfg.include_empty_classes
        )
        for b in branches
    }
    return EvalReport(
        per_class_ap=per_class,
        map=float(np.mean(scored)) if scored else 0.0,
        per_subnet_map=subnet_map,
        n_images=len(images),
        n_gt=int(sum(gt_counts.values())),
        gt_per_class=gt_counts,
        config_fingerprint=cfg.fingerprint(),
        pr_curves=curves,
    )


def _read_log(path: Path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {}
    for key in rows[0].keys() if rows else []:
        vals = [r[key] for r in rows]
        cols[key] = np.array([float(v) if v not in ("", None) else np.nan for v in vals])
    return cols


def _smooth(x: np.ndarray, k: int = 25) -> np.ndarray:
    if len(x) < k:
        return x
    kernel = np.ones(k) / k
    return np.convolve(np.nan_to_num(x), kernel, mode="valid")


def write_report(runs_dir, out_dir=None) -> Path:
    """Plots (PR curves, beta trajectories, loss decomposition) and a markdown summary for every run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs_dir = Path(runs_dir)
    out_dir = Path(out_dir) if out_dir is not None else runs_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    run_dirs = sorted(p for p in runs_dir.iterdir() if (p / "log.csv").is_file()) if runs_dir.is_dir() else []
    if (runs_dir / "log.csv").is_file():
        run_dirs = [runs_dir]
    lines = ["# Run report", "", "| run | method | steps | faults | final beta | mAP |", "|---|---|---|---|---|---|"]
    for run in run_dirs:
        cols = _read_log(run / "log.csv")
        summary = json.loads((run / "summary.json").read_text()) if (run / "summary.json").is_file() else {}
        report = json.loads((run / "report.json").read_text()) if (run / "report.json").is_file() else None
        name = run.name
        t = cols.get("t", np.arange(0))

        beta_keys = sorted(k for k in cols if k.startswith("beta_"))
        if beta_keys:
            fig, ax = plt.subplots(figsize=(6, 3.5))
            for k in beta_keys:
                ax.plot(t, cols[k], label=k)
            ax.set_xlabel("step")
            ax.set_ylabel("source weight")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out_dir / f"{name}_beta.png", dpi=100)
            plt.close(fig)

        fig, ax = plt.subplots(figsize=(6, 3.5))
        for k in ("det", "low", "high", "con", "total"):
            if k in cols and np.isfinite(cols[k]).any():
                ax.plot(t[: len(_smooth(cols[k]))], _smooth(cols[k]), label=k)
        ax.set_xlabel("step")
        ax.set_ylabel("loss (moving average)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"{name}_losses.png", dpi=100)
        plt.close(fig)

        map_text = "-"
        if report is not None:
            map_text = f"{report['map']:.3f}"
            fig, ax = plt.subplots(figsize=(4.5, 4))
            for cls, curve in report.get("pr_curves", {}).items():
                ax.plot(curve["recall"], curve["precision"], label=f"{cls} AP={report['per_class_ap'][cls]:.2f}")
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1.02)
            ax.legend()
            fig.tight_layout()
            fig.savefig(out_dir / f"{name}_pr.png", dpi=100)
            plt.close(fig)
        beta = summary.get("final_beta")
        beta_text = ", ".join(f"{b:.3f}" for b in beta) if beta else "-"
        method = summary.get("config", {}).get("method", "-")
        lines.append(
            f"| {name} | {method} | {summary.get('steps', len(t))} | {summary.get('faults', '-')} | {beta_text} | {map_text} |"
        )
    path = out_dir / "summary.md"
    path.write_text("\n".join(lines) + "\n")
    return path

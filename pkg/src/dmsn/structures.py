"""Record types shared by the data, detector, consistency and evaluation code."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import PreconditionError

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    box: Box

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise PreconditionError(f"degenerate box {self.box}")
        if self.class_id < 0:
            raise PreconditionError(f"negative class id {self.class_id}")

    def to_dict(self) -> dict:
        return {"class_id": int(self.class_id), "box": [float(v) for v in self.box]}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxAnnotation":
        return cls(int(d["class_id"]), tuple(float(v) for v in d["box"]))


@dataclass
class ImageSample:
    """One image with its domain and (possibly hidden) box annotations.

    ``pixels`` is a float32 ``H x W x 3`` array with values on the 1/255 grid
    in ``[0, 1]``, so that a PNG round trip is exact.
    """

    pixels: np.ndarray
    domain_id: int
    boxes: List[BoxAnnotation] = field(default_factory=list)
    sample_id: str = ""

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def unlabeled(self) -> "ImageSample":
        """Copy with annotations hidden, as handed to the trainer for the target domain."""
        return replace(self, boxes=[])

    def gt_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Ground truth as ``(boxes[K, 4], class_ids[K])`` arrays."""
        if not self.boxes:
            return np.zeros((0, 4)), np.zeros((0,), dtype=np.int64)
        boxes = np.array([b.box for b in self.boxes], dtype=np.float64)
        labels = np.array([b.class_id for b in self.boxes], dtype=np.int64)
        return boxes, labels


@dataclass
class FeatureMap:
    """Batched activations ``[B, C, H, W]`` with the input-pixel stride of one cell."""

    activations: "object"  # torch.Tensor; kept untyped to avoid importing torch here
    stride: int

    @property
    def shape(self):
        return tuple(self.activations.shape)


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float
    rank: int


@dataclass
class ProposalSet:
    """Exactly ``N`` ranked proposals for one image.

    Rows are ordered by rank (row ``n`` has rank ``n + 1``). ``anchor_index``
    maps each row to the anchor that produced it so objectness logits can be
    gathered with gradients; ``n_unique`` counts rows before padding.
    """

    boxes: np.ndarray
    objectness: np.ndarray
    anchor_index: Optional[np.ndarray] = None
    n_unique: Optional[int] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.objectness = np.asarray(self.objectness, dtype=np.float64).reshape(-1)
        if len(self.boxes) != len(self.objectness):
            raise PreconditionError("boxes and objectness differ in length")
        if self.n_unique is None:
            self.n_unique = len(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)

    @property
    def proposals(self) -> List[Proposal]:
        return [
            Proposal(tuple(float(v) for v in b), float(s), r)
            for b, s, r in zip(self.boxes, self.objectness, self.ranks)
        ]

    @classmethod
    def from_boxes(cls, boxes: Sequence[Sequence[float]], objectness=None) -> "ProposalSet":
        """Build a set from boxes already in rank order; objectness defaults to a descending ramp."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if objectness is None:
            objectness = -np.arange(len(boxes), dtype=np.float64)
        return cls(boxes, objectness)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    subnet_id: int = 0

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "class_id": int(self.class_id),
            "score": float(self.score),
            "subnet_id": int(self.subnet_id),
        }

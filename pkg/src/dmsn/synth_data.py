"""Deterministic synthetic multi-domain detection data.

Each domain renders the same shape classes onto its own background palette
and then applies a domain-wide appearance shift (hue rotation, brightness,
pixel noise). Images are quantized to 8 bits so PNG storage is lossless.
"""
from __future__ import annotations

import hashlib
import io
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .boxes import iou_matrix
from .exceptions import ConfigurationError, DatasetCorruptionError, DatasetIOError
from .structures import BoxAnnotation, ImageSample

SHAPE_KINDS = ("circle", "square", "triangle", "diamond")
MAX_PAIR_IOU = 0.3
SCHEMA_VERSION = 1

# saturated object colours, shared by all domains so colour carries no class signal
OBJECT_PALETTE = (
    (0.9, 0.1, 0.1),
    (0.1, 0.8, 0.1),
    (0.1, 0.2, 0.9),
    (0.9, 0.8, 0.1),
    (0.8, 0.1, 0.8),
    (0.1, 0.8, 0.8),
    (0.95, 0.95, 0.95),
)


@dataclass
class Appearance:
    background_palette: List[Tuple[float, float, float]]
    brightness_shift: float = 0.0
    noise_sigma: float = 0.0
    hue_rotation: float = 0.0
    # photographic negative, applied before the colour shifts
    invert: bool = False

    def validate(self):
        if not self.background_palette:
            raise ConfigurationError("background_palette is empty")
        for rgb in self.background_palette:
            if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
                raise ConfigurationError(f"palette entry {rgb} is not an RGB triple in [0, 1]")
        if not -0.5 <= self.brightness_shift <= 0.5:
            raise ConfigurationError("brightness_shift must lie in [-0.5, 0.5]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if not 0.0 <= self.hue_rotation < 360.0:
            raise ConfigurationError("hue_rotation must lie in [0, 360)")


@dataclass
class DomainSpec:
    domain_id: int
    appearance: Appearance
    num_images: int
    image_size: Tuple[int, int] = (64, 64)
    classes: List[str] = field(default_factory=lambda: ["circle", "square", "triangle"])
    objects_per_image: Tuple[int, int] = (1, 3)
    # half-extent range of rendered objects, in pixels
    object_size: Tuple[float, float] = (7.0, 13.0)

    def validate(self):
        if self.domain_id < 0:
            raise ConfigurationError("domain_id must be >= 0")
        self.appearance.validate()
        if self.num_images <= 0:
            raise ConfigurationError("num_images must be positive")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ConfigurationError(f"zero-area image size {self.image_size}")
        if not self.classes:
            raise ConfigurationError("classes is empty")
        unknown = set(self.classes) - set(SHAPE_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown shape kinds {sorted(unknown)}")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad objects_per_image range {self.objects_per_image}")
        smin, smax = self.object_size
        if smin <= 0 or smax < smin or 2 * smax >= min(h, w):
            raise ConfigurationError(f"object_size {self.object_size} does not fit the image")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        app = d.pop("appearance")
        app["background_palette"] = [tuple(c) for c in app["background_palette"]]
        return cls(
            appearance=Appearance(**app),
            image_size=tuple(d.pop("image_size")),
            objects_per_image=tuple(d.pop("objects_per_image")),
            object_size=tuple(d.pop("object_size", (7.0, 13.0))),
            **d,
        )


class Dataset(Mapping):
    """Mapping ``domain_id -> list[ImageSample]`` that remembers its generating specs."""

    def __init__(self, domains: Dict[int, List[ImageSample]], specs: Sequence[DomainSpec], seed: int | None = None):
        self._domains = dict(domains)
        self.specs = {s.domain_id: s for s in specs}
        self.seed = seed

    def __getitem__(self, domain_id: int) -> List[ImageSample]:
        return self._domains[domain_id]

    def __iter__(self) -> Iterator[int]:
        return iter(self._domains)

    def __len__(self) -> int:
        return len(self._domains)

    @property
    def classes(self) -> List[str]:
        return list(next(iter(self.specs.values())).classes)

    @property
    def image_size(self) -> Tuple[int, int]:
        return tuple(next(iter(self.specs.values())).image_size)

    def __eq__(self, other):
        if not isinstance(other, Mapping) or set(self) != set(other):
            return False
        for d in self:
            a, b = self[d], other[d]
            if len(a) != len(b):
                return False
            for x, y in zip(a, b):
                if (
                    x.sample_id != y.sample_id
                    or x.domain_id != y.domain_id
                    or x.boxes != y.boxes
                    or not np.array_equal(x.pixels, y.pixels)
                ):
                    return False
        return True

    __hash__ = None


def sample_seed(seed: int, sample_id: str) -> int:
    """Per-image seed; lets workers render any image independently."""
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _hue_matrix(degrees: float) -> np.ndarray:
    # rotation about the grey axis of RGB space
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    return np.array(
        [
            [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
            [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
            [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
        ]
    )


def _shape_mask(kind: str, cx: float, cy: float, s: float, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    dx, dy = px - cx, py - cy
    if kind == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if kind == "circle":
        return dx**2 + dy**2 <= s**2
    if kind == "triangle":
        return (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= s
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _place_objects(rng: np.random.Generator, spec: DomainSpec) -> List[BoxAnnotation]:
    h, w = spec.image_size
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    smin, smax = spec.object_size
    placed: List[BoxAnnotation] = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > 1000:
            raise ConfigurationError("could not place objects without exceeding the overlap limit")
        s = float(rng.uniform(smin, smax))
        cx = float(rng.uniform(s, w - s))
        cy = float(rng.uniform(s, h - s))
        class_id = int(rng.integers(len(spec.classes)))
        box = (cx - s, cy - s, cx + s, cy + s)
        if placed:
            overlaps = iou_matrix([box], [p.box for p in placed])
            if overlaps.max() > MAX_PAIR_IOU:
                continue
        placed.append(BoxAnnotation(class_id, box))
    return placed


def render_image(spec: DomainSpec, sample_id: str, seed: int) -> ImageSample:
    rng = np.random.default_rng(sample_seed(seed, sample_id))
    h, w = spec.image_size
    app = spec.appearance
    bg = np.asarray(app.background_palette[rng.integers(len(app.background_palette))], dtype=np.float64)
    # mild vertical gradient keeps backgrounds from being perfectly flat
    ramp = np.linspace(-0.05, 0.05, h)[:, None, None]
    img = np.broadcast_to(bg, (h, w, 3)) + ramp
    annotations = _place_objects(rng, spec)
    for ann in annotations:
        x1, y1, x2, y2 = ann.box
        s = (x2 - x1) / 2.0
        colour = np.asarray(OBJECT_PALETTE[rng.integers(len(OBJECT_PALETTE))])
        mask = _shape_mask(spec.classes[ann.class_id], x1 + s, y1 + s, s, h, w)
        img = np.where(mask[..., None], colour, img)
    if app.invert:
        img = 1.0 - img
    img = img @ _hue_matrix(app.hue_rotation).T
    img = img + app.brightness_shift
    if app.noise_sigma > 0:
        img = img + rng.normal(0.0, app.noise_sigma, size=img.shape)
    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return ImageSample(
        pixels=quantized.astype(np.float32) / 255.0,
        domain_id=spec.domain_id,
        boxes=annotations,
        sample_id=sample_id,
    )


def _check_specs(specs: Sequence[DomainSpec]):
    if not specs:
        raise ConfigurationError("at least one DomainSpec is required")
    for s in specs:
        s.validate()
    first = specs[0]
    for s in specs[1:]:
        if list(s.classes) != list(first.classes):
            raise ConfigurationError("all domains must share the same class list")
        if tuple(s.image_size) != tuple(first.image_size):
            raise ConfigurationError("all domains must share the same image size")
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate domain ids {ids}")


def generate_dataset(specs: Sequence[DomainSpec], seed: int) -> Dataset:
    """Render every domain; a pure function of ``(specs, seed)``."""
    _check_specs(specs)
    domains = {}
    for spec in specs:
        domains[spec.domain_id] = [
            render_image(spec, f"d{spec.domain_id}_{j:05d}", seed) for j in range(spec.num_images)
        ]
    return Dataset(domains, specs, seed)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.round(pixels * 255.0).astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_dataset(dataset: Dataset, root) -> Path:
    """Write PNGs, per-domain ``annotations.jsonl`` and a checksummed ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for domain_id in sorted(dataset):
        ddir = root / str(domain_id)
        ddir.mkdir(exist_ok=True)
        files = {}
        lines = []
        for sample in dataset[domain_id]:
            data = _png_bytes(sample.pixels)
            (ddir / f"{sample.sample_id}.png").write_bytes(data)
            files[sample.sample_id] = _sha256(data)
            lines.append(
                json.dumps({"sample_id": sample.sample_id, "boxes": [b.to_dict() for b in sample.boxes]})
            )
        ann_bytes = ("\n".join(lines) + "\n").encode()
        (ddir / "annotations.jsonl").write_bytes(ann_bytes)
        spec = dataset.specs.get(domain_id)
        entries.append(
            {
                "domain_id": domain_id,
                "num_images": len(dataset[domain_id]),
                "spec": spec.to_dict() if spec is not None else None,
                "annotations_sha256": _sha256(ann_bytes),
                "images": files,
            }
        )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": dataset.seed,
        "classes": dataset.classes,
        "domains": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetIOError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetCorruptionError(f"unreadable manifest {path}: {exc}") from exc
    domains, specs = {}, []
    for entry in manifest["domains"]:
        domain_id = int(entry["domain_id"])
        ddir = root / str(domain_id)
        ann_path = ddir / "annotations.jsonl"
        if not ann_path.is_file():
            raise DatasetIOError(f"missing {ann_path}")
        ann_bytes = ann_path.read_bytes()
        if _sha256(ann_bytes) != entry["annotations_sha256"]:
            raise DatasetCorruptionError(f"checksum mismatch for {ann_path}")
        records = [json.loads(line) for line in ann_bytes.decode().splitlines() if line.strip()]
        samples = []
        for rec in records:
            sid = rec["sample_id"]
            img_path = ddir / f"{sid}.png"
            if not img_path.is_file():
                raise DatasetIOError(f"missing {img_path}")
            data = img_path.read_bytes()
            if _sha256(data) != entry["images"].get(sid):
                raise DatasetCorruptionError(f"checksum mismatch for {img_path}")
            arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.uint8)
            samples.append(
                ImageSample(
                    pixels=arr.astype(np.float32) / 255.0,
                    domain_id=domain_id,
                    boxes=[BoxAnnotation.from_dict(b) for b in rec["boxes"]],
                    sample_id=sid,
                )
            )
        if len(samples) != entry["num_images"]:
            raise DatasetCorruptionError(f"domain {domain_id}: expected {entry['num_images']} images")
        domains[domain_id] = samples
        if entry.get("spec") is not None:
            specs.append(DomainSpec.from_dict(entry["spec"]))
    return Dataset(domains, specs, manifest.get("seed"))


def default_domain_specs(
    num_images: int = 200,
    image_size: Tuple[int, int] = (64, 64),
    classes: Sequence[str] = ("circle", "square", "triangle"),
) -> List[DomainSpec]:
    """Three domains: two sources and a target, with distinct appearance shifts.

    The target sits between the sources in colour space, mimicking a
    daytime target adapted from night and dusk sources.
    """
    common = dict(num_images=num_images, image_size=tuple(image_size), classes=list(classes))
    return [
        DomainSpec(
            0,
            Appearance([(0.15, 0.15, 0.25), (0.2, 0.1, 0.1)], brightness_shift=-0.2, noise_sigma=0.03),
            **common,
        ),
        DomainSpec(
            1,
            Appearance([(0.6, 0.5, 0.3), (0.5, 0.6, 0.4)], brightness_shift=0.1, noise_sigma=0.08, hue_rotation=40.0),
            **common,
        ),
        DomainSpec(
            2,
            Appearance([(0.35, 0.45, 0.6), (0.4, 0.4, 0.4)], brightness_shift=0.0, noise_sigma=0.2, hue_rotation=200.0),
            **common,
        ),
    ]

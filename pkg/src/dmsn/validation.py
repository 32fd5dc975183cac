"""Input coercion and checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .exceptions import PreconditionError, ShapeError
from .structures import BoxAnnotation, ImageSample


def check_image_array(pixels, image_size: Optional[tuple] = None) -> np.ndarray:
    """Return ``pixels`` as a finite float32 ``H x W x 3`` array in ``[0, 1]``."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise PreconditionError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise PreconditionError("pixel values must lie in [0, 1] (or be uint8)")
    if image_size is not None and tuple(arr.shape[:2]) != tuple(image_size):
        raise ShapeError(f"expected images of size {tuple(image_size)}, got {arr.shape[:2]}")
    return arr


def check_images(X, image_size: Optional[tuple] = None, domain_id: int = -1) -> List[ImageSample]:
    """Coerce ``X`` to a list of :class:`ImageSample`.

    ``X`` may be a list of samples, a list of ``H x W x 3`` arrays or one
    ``N x H x W x 3`` array. Samples keep their annotations.
    """
    if isinstance(X, ImageSample):
        raise PreconditionError("pass a sequence of images, not a single sample")
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise ShapeError(f"expected an N x H x W x 3 array, got shape {X.shape}")
        X = list(X)
    if len(X) == 0:
        raise PreconditionError("no images given")
    out = []
    for k, item in enumerate(X):
        if isinstance(item, ImageSample):
            check_image_array(item.pixels, image_size)
            out.append(item)
        else:
            pixels = check_image_array(item, image_size)
            out.append(ImageSample(pixels, domain_id, [], f"x{k:05d}"))
    sizes = {(s.height, s.width) for s in out}
    if len(sizes) != 1:
        raise ShapeError(f"images have mixed sizes {sorted(sizes)}")
    return out


def check_annotations(y, n_images: int) -> List[List[BoxAnnotation]]:
    """Coerce per-image ground truth to lists of :class:`BoxAnnotation`.

    Each entry may be a list of annotations, a ``(boxes, labels)`` pair or a
    dict with ``boxes`` and ``labels``.
    """
    if len(y) != n_images:
        raise ShapeError(f"{len(y)} annotation entries for {n_images} images")
    out = []
    for entry in y:
        if isinstance(entry, dict):
            entry = (entry["boxes"], entry["labels"])
        if isinstance(entry, tuple):
            boxes = np.asarray(entry[0], dtype=np.float64).reshape(-1, 4)
            labels = np.asarray(entry[1], dtype=np.int64).reshape(-1)
            if len(boxes) != len(labels):
                raise ShapeError("boxes and labels differ in length")
            entry = [BoxAnnotation(int(c), tuple(float(v) for v in b)) for b, c in zip(boxes, labels)]
        anns = list(entry)
        if not all(isinstance(a, BoxAnnotation) for a in anns):
            raise PreconditionError("annotations must be BoxAnnotation objects")
        out.append(anns)
    return out


def check_labelled(samples: Sequence[ImageSample], name: str = "images"):
    if not any(s.boxes for s in samples):
        raise PreconditionError(f"{name} carry no box annotations")

"""Single-file checkpoint archive: named arrays plus a JSON metadata record.

The archive is a ``.npz`` written with fixed zip timestamps so identical
contents give byte-identical files.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .exceptions import CheckpointError

SCHEMA_VERSION = 1
_META_KEY = "__metadata__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path, arrays: Dict[str, np.ndarray], metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata)
    meta.setdefault("schema_version", SCHEMA_VERSION)
    entries = dict(arrays)
    entries[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(entries[key]), allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    tmp.replace(path)
    return path


def load_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if _META_KEY not in arrays:
        raise CheckpointError(f"{path} has no metadata record")
    meta = json.loads(arrays.pop(_META_KEY).tobytes().decode())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {meta.get('schema_version')}")
    return arrays, meta


def arrays_checksum(arrays: Dict[str, np.ndarray]) -> str:
    """Content hash over sorted keys, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Versioned named-array weight container.

Layout (all integers little-endian):
    magic b"CTWS" | u32 format version | u16 digest length | digest (utf-8)
    | u32 array count | per array:
        u16 name length | name (utf-8) | u8 ndim | u32 * ndim dims
        | float32 little-endian data

Loading validates the stored config digest against the caller's expectation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import WeightStoreError

MAGIC = b"CTWS"
FORMAT_VERSION = 1


def config_digest(config_fields: dict) -> str:
    """Stable digest of a configuration mapping (canonical JSON, sha256)."""
    canon = json.dumps(config_fields, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_weights(path, digest: str, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest_b = digest.encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<H", len(digest_b)))
        fh.write(digest_b)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            # asarray(order="C") keeps 0-d shapes (ascontiguousarray would 1-d them)
            arr = np.asarray(arrays[name], dtype="<f4", order="C")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def load_weights(path, expected_digest: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise WeightStoreError(f"cannot read {path}: {exc}") from exc
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise WeightStoreError(f"{path}: truncated store")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightStoreError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise WeightStoreError(f"{path}: unsupported format version {version}")
    (dlen,) = struct.unpack("<H", take(2))
    digest = bytes(take(dlen)).decode("utf-8")
    if expected_digest is not None and digest != expected_digest:
        raise WeightStoreError(
            f"{path}: config digest mismatch (stored {digest[:12]}..., "
            f"expected {expected_digest[:12]}...)"
        )
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(shape)
        arrays[name] = arr.copy()
    if pos != len(view):
        raise WeightStoreError(f"{path}: trailing bytes after last array")
    return digest, arrays

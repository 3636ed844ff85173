"""Single-file array container shared by features, checkpoints and score files.

Layout::

    magic           8 bytes, identifies the payload kind
    manifest_len    uint64, little-endian
    manifest        UTF-8 JSON: metadata plus one entry per array
                    (name, shape, byte offset into the blob)
    blob            concatenated row-major little-endian float32 arrays

The manifest also records ``dtype``, ``endianness`` and ``blob_bytes`` so a
reader in any language can validate the file before touching the blob.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

DTYPE = "<f4"


class ContainerError(ValueError):
    pass


def write_container(path, magic: bytes, meta: dict, arrays: Sequence[Tuple[str, np.ndarray]]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries: List[dict] = []
    chunks: List[bytes] = []
    offset = 0
    for name, arr in arrays:
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64).astype(DTYPE))
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest.update(
        {"dtype": "float32", "endianness": "little", "arrays": entries, "blob_bytes": offset}
    )
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for c in chunks:
            fh.write(c)


def read_container(path, magic: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse a container; raises :class:`ContainerError` naming the bad offset."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ContainerError(f"{path}: truncated header at offset {len(data)} (need 16 bytes)")
    if data[:8] != magic:
        raise ContainerError(f"{path}: bad magic at offset 0: {data[:8]!r}, expected {magic!r}")
    (mlen,) = struct.unpack("<Q", data[8:16])
    if 16 + mlen > len(data):
        raise ContainerError(
            f"{path}: manifest of {mlen} bytes at offset 16 runs past end of file ({len(data)} bytes)"
        )
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed manifest at offset 16: {exc}") from None
    if manifest.get("dtype") != "float32" or manifest.get("endianness") != "little":
        raise ContainerError(f"{path}: unsupported dtype/endianness in manifest at offset 16")
    blob_start = 16 + mlen
    blob = data[blob_start:]
    if len(blob) != manifest.get("blob_bytes"):
        raise ContainerError(
            f"{path}: blob at offset {blob_start} has {len(blob)} bytes, "
            f"manifest declares {manifest.get('blob_bytes')}"
        )
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape)) * 4
        off = int(entry["offset"])
        if off < 0 or off + n > len(blob):
            raise ContainerError(
                f"{path}: array {entry['name']!r} at offset {blob_start + off} "
                f"({n} bytes) exceeds blob"
            )
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype=DTYPE, count=n // 4, offset=off).reshape(shape).astype(np.float64)
        )
    return manifest, arrays

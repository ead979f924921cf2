"""Shared binary checkpoint format.

Layout: magic, version, a canonical-JSON metadata block, a table of
(name, shape, offset) entries, then raw little-endian float32 payloads.
Entries are written in sorted-name order and JSON is canonicalized, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLOWCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    meta_blob = canonical_json(meta)
    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<Q", len(meta_blob))
    header += meta_blob
    header += struct.pack("<I", len(names))

    offset = 0
    payloads = []
    table = bytearray()
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            table += struct.pack("<I", d)
        table += struct.pack("<Q", offset)
        raw = arr.tobytes(order="C")
        payloads.append(raw)
        offset += len(raw)

    with open(path, "wb") as f:
        f.write(header)
        f.write(table)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_entries,) = struct.unpack_from("<I", blob, pos)
    pos += 4

    entries = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, tuple(int(d) for d in shape), offset))

    payload_start = pos
    arrays: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        start = payload_start + offset
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated payload for entry {name!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        arrays[name] = arr.astype(np.float32)
    return meta, arrays


def assign_params(params: dict[str, "object"], arrays: dict[str, np.ndarray]) -> None:
    """Load arrays into an existing named-parameter dict, shape-checked."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.copy()

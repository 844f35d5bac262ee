"""Binary checkpoint container.

Layout: magic "UHCK" | format version u32 | config digest (32 bytes sha256) |
tensor count u32 | per tensor: name length u32 + utf8 name, dtype tag u8,
rank u8, extents u32 each, raw little-endian float32 data. Tensors are
written sorted by name so equal state produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"UHCK"
VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


def config_digest(cfg_obj) -> bytes:
    """sha256 over the canonical JSON form of any jsonable config object."""
    blob = json.dumps(cfg_obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).digest()


def save_checkpoint(path, tensors: dict, digest: bytes) -> None:
    if len(digest) != 32:
        raise CheckpointError(f"digest must be 32 bytes, got {len(digest)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [MAGIC, struct.pack("<I", VERSION), digest,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        data = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_F32, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expect_digest: bytes | None = None) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {off} of {len(blob)}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32)
    if expect_digest is not None and digest != expect_digest:
        raise CheckpointError(
            "config digest mismatch: checkpoint was written under a different "
            f"configuration (stored {digest.hex()[:12]}…, current {expect_digest.hex()[:12]}…)")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        dtype_tag, rank = struct.unpack("<BB", take(2))
        if dtype_tag != _DTYPE_F32:
            raise CheckpointError(f"unknown dtype tag {dtype_tag} for tensor {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last tensor")
    return out


def stored_digest(path) -> bytes:
    blob = Path(path).read_bytes()
    if len(blob) < 40 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    return blob[8:40]


def apply_tensors(named: dict, loaded: dict[str, np.ndarray], context: str = "model") -> None:
    """Copy loaded arrays into live tensors; errors name the offending tensor."""
    missing = sorted(set(named) - set(loaded))
    if missing:
        raise CheckpointError(f"{context}: checkpoint missing tensors {missing[:5]}")
    for name, tensor in named.items():
        arr = loaded[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{context}: shape mismatch for tensor {name!r}: "
                f"checkpoint {tuple(arr.shape)} vs model {tuple(tensor.shape)}")
        tensor.data = arr.astype(tensor.dtype).copy()

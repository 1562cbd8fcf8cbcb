"""Tiny binary containers for images, masks and network checkpoints.

Image file (little-endian throughout):

    magic b"ADIM" | u8 version=1 | u8 dtype (1=float32 image, 2=uint8 mask)
    | u32 height | u32 width | row-major payload

Checkpoint file:

    magic b"ADCK" | u8 version=1 | u32 arch-json length | arch-json (utf-8)
    | 32-byte sha256 of the arch json | u32 n_records
    | records: [u16 name-len | name utf-8 | u8 ndim | u32 x ndim dims
               | float32 payload]
    | 32-byte sha256 of everything before it

The trailing digest makes truncation and corruption detectable; loader errors
are explicit and never return partially-read data.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"ADIM"
CHECKPOINT_MAGIC = b"ADCK"


class FormatError(Exception):
    """Raised for bad magic, version, truncation or digest mismatch."""


def write_image(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D array, got shape {arr.shape}")
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        code, payload = 2, arr.astype(np.uint8).tobytes()
    else:
        code, payload = 1, arr.astype("<f4").tobytes()
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC + struct.pack("<BBII", 1, code, h, w) + payload)


def read_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 14 or blob[:4] != IMAGE_MAGIC:
        raise FormatError(f"{path}: not an image container")
    version, code, h, w = struct.unpack("<BBII", blob[4:14])
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if code == 1:
        expected = 14 + 4 * h * w
        dtype = "<f4"
    elif code == 2:
        expected = 14 + h * w
        dtype = np.uint8
    else:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if len(blob) != expected:
        raise FormatError(f"{path}: truncated or oversized ({len(blob)} != {expected} bytes)")
    arr = np.frombuffer(blob[14:], dtype=dtype).reshape(h, w)
    return arr.astype(np.float32) if code == 1 else arr.copy()


def save_checkpoint(path, arch_json: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors plus the architecture description."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", 1)]
    blob = arch_json.encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(hashlib.sha256(blob).digest())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[str, str, dict[str, np.ndarray]]:
    """Returns (arch_json, arch_sha256_hex, tensors). Verifies the digest."""
    blob = Path(path).read_bytes()
    if len(blob) < 5 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    if blob[4] != 1:
        raise FormatError(f"{path}: unsupported version {blob[4]}")
    if len(blob) < 32:
        raise FormatError(f"{path}: truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: digest mismatch (corrupt or truncated)")

    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"{path}: truncated record data")
        out = body[pos:pos + n]
        pos += n
        return out

    (alen,) = struct.unpack("<I", take(4))
    arch_json = take(alen).decode("utf-8")
    arch_digest = take(32)
    if hashlib.sha256(arch_json.encode("utf-8")).digest() != arch_digest:
        raise FormatError(f"{path}: architecture hash mismatch")
    (n,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes after records")
    return arch_json, arch_digest.hex(), tensors

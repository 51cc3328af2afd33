"""File formats: weight checkpoints, probability maps, PNG rasters, annotation JSON."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

CKPT_MAGIC = b"FSEGCKPT"
CKPT_VERSION = 1
PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors as little-endian float32, in the given order."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(buf):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def save_probmap(path, probs: np.ndarray) -> None:
    """``probs`` is ``[H, W, K]``; stored row-major with the class index fastest."""
    h, w, k = probs.shape
    header = PMAP_MAGIC + struct.pack("<IIII", PMAP_VERSION, h, w, k)
    Path(path).write_bytes(header + np.ascontiguousarray(probs, dtype="<f4").tobytes())


def load_probmap(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != PMAP_MAGIC or len(buf) < 20:
        raise FormatError(f"{path}: not a probability map")
    version, h, w, k = struct.unpack_from("<IIII", buf, 4)
    if version != PMAP_VERSION:
        raise FormatError(f"{path}: unsupported PMAP version {version}")
    if len(buf) != 20 + 4 * h * w * k:
        raise FormatError(f"{path}: payload size does not match {h}x{w}x{k}")
    return np.frombuffer(buf, dtype="<f4", offset=20).reshape(h, w, k).astype(np.float32)


def save_labels_png(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_labels_png(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read PNG ({exc})") from None
    if img.mode not in ("L", "P"):
        raise FormatError(f"{path}: label PNG must be 8-bit single channel, got mode {img.mode}")
    return np.array(img, dtype=np.uint8)


def save_image_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read PNG ({exc})") from None
    return np.array(img.convert("RGB"), dtype=np.uint8)


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None

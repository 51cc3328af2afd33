"""Sparse point / line / polygon annotations and their rasterization.

Label maps are plain ``uint8`` arrays of shape ``[H, W]``; ``UNLABELED``
(255) marks pixels without annotation.  Coordinates are ``(x, y)`` integer
pixel positions, ``x`` along the width.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from math import gcd
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

UNLABELED = 255
MAX_CLASSES = 254
KINDS = ("point", "line", "polygon")
_MIN_COORDS = {"point": 1, "line": 2, "polygon": 3}


@dataclass(frozen=True)
class SparseAnnotation:
    kind: str
    class_id: int
    coords: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown annotation kind {self.kind!r}")
        coords = tuple((int(x), int(y)) for x, y in self.coords)
        object.__setattr__(self, "coords", coords)
        if self.kind == "point" and len(coords) != 1:
            raise ValidationError(f"point annotation needs exactly 1 coordinate, got {len(coords)}")
        if len(coords) < _MIN_COORDS[self.kind]:
            raise ValidationError(f"{self.kind} annotation needs >= {_MIN_COORDS[self.kind]} coordinates")
        if int(self.class_id) < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "class_id": int(self.class_id), "coords": [list(c) for c in self.coords]}

    @classmethod
    def from_dict(cls, d: dict) -> "SparseAnnotation":
        try:
            return cls(d["kind"], int(d["class_id"]), tuple(tuple(c) for c in d["coords"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed annotation {d!r}: {exc}") from None


def save_annotations(path, annotations) -> None:
    Path(path).write_text(json.dumps([a.to_dict() for a in annotations], indent=1) + "\n")


def load_annotations(path) -> list[SparseAnnotation]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, list):
        raise FormatError(f"{path}: expected a JSON array of annotations")
    return [SparseAnnotation.from_dict(d) for d in raw]


def bresenham(p0, p1) -> list[tuple[int, int]]:
    """8-connected integer line from ``p0`` to ``p1`` inclusive."""
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pts = []
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def polyline_mask(coords, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for a, b in zip(coords[:-1], coords[1:]):
        for x, y in bresenham(a, b):
            mask[y, x] = True
    return mask


def fill_polygon(coords, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill including every lattice point on the boundary."""
    mask = np.zeros((height, width), dtype=bool)
    n = len(coords)
    edges = [(coords[i], coords[(i + 1) % n]) for i in range(n)]
    ys = [y for _, y in coords]
    for y in range(max(0, min(ys)), min(height - 1, max(ys)) + 1):
        xs = []
        for (x0, y0), (x1, y1) in edges:
            if (y0 <= y < y1) or (y1 <= y < y0):
                xs.append(x0 + Fraction((y - y0) * (x1 - x0), y1 - y0))
        xs.sort()
        for xa, xb in zip(xs[0::2], xs[1::2]):
            lo = max(0, -((-xa.numerator) // xa.denominator))
            hi = min(width - 1, xb.numerator // xb.denominator)
            if lo <= hi:
                mask[y, lo:hi + 1] = True
    for (x0, y0), (x1, y1) in edges:
        g = gcd(abs(x1 - x0), abs(y1 - y0))
        if g == 0:
            pts = [(x0, y0)]
        else:
            sx, sy = (x1 - x0) // g, (y1 - y0) // g
            pts = [(x0 + k * sx, y0 + k * sy) for k in range(g + 1)]
        for x, y in pts:
            if 0 <= x < width and 0 <= y < height:
                mask[y, x] = True
    return mask


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dx * dx + dy * dy <= r * r]


def dilate_disk(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by the lattice disk ``dx^2 + dy^2 <= r^2``, clipped at the borders."""
    if radius < 0:
        raise ValidationError(f"dilation radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy, dx in disk_offsets(radius):
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[yd, xd] |= mask[ys, xs]
    return out


def annotation_mask(ann: SparseAnnotation, height: int, width: int, dilation_radius: int = 3) -> np.ndarray:
    if ann.kind == "polygon":
        return fill_polygon(ann.coords, height, width)
    if ann.kind == "point":
        base = np.zeros((height, width), dtype=bool)
        x, y = ann.coords[0]
        base[y, x] = True
    else:
        base = polyline_mask(ann.coords, height, width)
    return dilate_disk(base, dilation_radius)


def rasterize(annotations, height: int, width: int, num_classes: int,
              dilation_radius: int = 3) -> tuple[np.ndarray, int]:
    """Burn annotations into a label map; later annotations win.

    Returns ``(labels, conflicts)`` where ``conflicts`` counts pixels whose
    existing class was overwritten by a different class.
    """
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValidationError(f"num_classes must be in [1, {MAX_CLASSES}], got {num_classes}")
    if dilation_radius < 0:
        raise ValidationError(f"dilation radius must be >= 0, got {dilation_radius}")
    labels = np.full((height, width), UNLABELED, dtype=np.uint8)
    conflicts = 0
    for ann in annotations:
        if ann.class_id >= num_classes:
            raise ValidationError(f"class_id {ann.class_id} >= num_classes {num_classes}")
        for x, y in ann.coords:
            if not (0 <= x < width and 0 <= y < height):
                raise ValidationError(f"coordinate ({x}, {y}) outside {width}x{height} image")
        mask = annotation_mask(ann, height, width, dilation_radius)
        prev = labels[mask]
        conflicts += int(np.count_nonzero((prev != UNLABELED) & (prev != ann.class_id)))
        labels[mask] = ann.class_id
    return labels, conflicts


def count_labeled(labels: np.ndarray, num_classes: int) -> tuple[np.ndarray, int]:
    """Per-class labeled pixel counts and their total (unlabeled excluded)."""
    labels = np.asarray(labels)
    counts = np.bincount(labels[labels != UNLABELED].ravel(), minlength=num_classes)[:num_classes]
    return counts.astype(np.int64), int(counts.sum())

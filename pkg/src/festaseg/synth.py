"""Synthetic scenes and a scribble simulator.

Scenes are Voronoi partitions whose cells carry class ids, rendered with one
mean color per class plus Gaussian pixel noise.  The last class is reserved
for small rectangular objects scattered over the scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .annotations import SparseAnnotation, bresenham, disk_offsets, fill_polygon
from .errors import GenerationError, ValidationError

LEVEL_DEFAULTS = {"point": 7, "line": 5, "polygon": 3}
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    num_classes: int = 5
    noise_sigma: float = 40.0
    min_region: int = 100
    num_sites: int = 0  # 0 -> two Voronoi sites per region class
    num_small_objects: int = 6
    min_color_distance: float = 60.0

    def validate(self) -> None:
        if not 2 <= self.num_classes <= 12:
            raise ValidationError(f"num_classes must be in [2, 12], got {self.num_classes}")
        if self.height < 8 or self.width < 8:
            raise ValidationError("scene must be at least 8x8")
        if self.noise_sigma < 0 or self.min_region < 0:
            raise ValidationError("noise_sigma and min_region must be >= 0")


@dataclass
class ScribblePolicy:
    level: str = "line"
    objects_per_class: int | None = None
    boundary_margin: int = 2
    seed: int = 0
    dilation_radius: int = 3
    max_line_length: int = 10
    max_vertices: int = 16

    def __post_init__(self):
        if self.level not in LEVEL_DEFAULTS:
            raise ValidationError(f"unknown scribble level {self.level!r}")
        if self.objects_per_class is None:
            self.objects_per_class = LEVEL_DEFAULTS[self.level]


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    st = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    for dy, dx in disk_offsets(r):
        st[dy + r, dx + r] = True
    return st


def _class_colors(rng: np.random.Generator, k: int, min_dist: float) -> np.ndarray:
    for _ in range(1000):
        colors = rng.integers(30, 226, size=(k, 3))
        d = np.sqrt(((colors[:, None, :] - colors[None, :, :]) ** 2).sum(-1))
        if d[np.triu_indices(k, 1)].min() >= min_dist:
            return colors
    raise GenerationError(f"could not draw {k} class colors at distance >= {min_dist}")


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image [H,W,3] uint8, dense labels [H,W] uint8)``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k, h, w = spec.num_classes, spec.height, spec.width
    region_classes = k - 1 if k >= 3 else k
    small_class = k - 1
    n_sites = spec.num_sites or 2 * region_classes
    n_sites = max(n_sites, region_classes)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(50):
        sites = rng.uniform((0, 0), (w, h), size=(n_sites, 2))
        site_class = rng.permutation(np.resize(np.arange(region_classes), n_sites))
        d2 = (xx[..., None] - sites[:, 0]) ** 2 + (yy[..., None] - sites[:, 1]) ** 2
        labels = site_class[d2.argmin(axis=-1)].astype(np.uint8)
        for _ in range(spec.num_small_objects):
            rh, rw = int(rng.integers(3, 6)), int(rng.integers(6, 11))
            if rng.random() < 0.5:
                rh, rw = rw, rh
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            labels[y0:y0 + rh, x0:x0 + rw] = small_class
        counts = np.bincount(labels.ravel(), minlength=k)
        if counts.min() >= spec.min_region:
            break
    else:
        raise GenerationError(
            f"could not place all {k} classes with >= {spec.min_region} pixels each in {h}x{w}")
    colors = _class_colors(rng, k, spec.min_color_distance)
    image = colors[labels].astype(np.float64)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, labels


# -- scribble simulation -------------------------------------------------------

def farthest_point_order(centroids: np.ndarray, sizes: np.ndarray, n: int) -> list[int]:
    """Start from the largest component, then repeatedly take the component
    whose centroid is farthest from everything chosen so far."""
    if len(centroids) == 0 or n <= 0:
        return []
    first = int(np.argmax(sizes))
    chosen = [first]
    dmin = np.sqrt(((centroids - centroids[first]) ** 2).sum(-1))
    dmin[first] = -1.0
    while len(chosen) < min(n, len(centroids)):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.sqrt(((centroids - centroids[nxt]) ** 2).sum(-1)))
        dmin[chosen] = -1.0
    return chosen


def interior_point(mask: np.ndarray) -> tuple[int, int]:
    """Pixel of ``mask`` farthest from the background (image border counts as
    background); ties go to the first pixel in row-major order.  Returns (x, y)."""
    dt = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    idx = int(np.argmax(dt))
    y, x = divmod(idx, mask.shape[1])
    return x, y


_NEIGHBORS = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def trace_contour(mask: np.ndarray) -> list[tuple[int, int]]:
    """Moore-neighbor tracing of the outer boundary of the component holding
    the first foreground pixel; returns (x, y) pixels in clockwise order."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return []
    h, w = mask.shape
    start = (int(ys[0]), int(xs[0]))

    def inside(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and mask[p]

    contour = [start]
    cur, back = start, 0  # entered from the west, which is background
    first_state = None
    for _ in range(8 * mask.size + 8):
        for k in range(1, 9):
            idx = (back + k) % 8
            cand = (cur[0] + _NEIGHBORS[idx][0], cur[1] + _NEIGHBORS[idx][1])
            if inside(cand):
                break
        else:
            return [(start[1], start[0])]
        prev_idx = (idx - 1) % 8
        bpt = (cur[0] + _NEIGHBORS[prev_idx][0], cur[1] + _NEIGHBORS[prev_idx][1])
        state = (cur, cand)
        if first_state is None:
            first_state = state
        elif state == first_state:
            break
        cur = cand
        back = _NEIGHBORS.index((bpt[0] - cur[0], bpt[1] - cur[1]))
        contour.append(cur)
    contour = contour[:-1] if len(contour) > 1 and contour[-1] == start else contour
    return [(x, y) for y, x in contour]


def _dp(points: np.ndarray, eps: float) -> list[int]:
    """Douglas-Peucker on an open polyline; returns kept indices."""
    if len(points) < 3:
        return list(range(len(points)))
    a, b = points[0], points[-1]
    ab = b - a
    L = np.hypot(*ab)
    rel = points[1:-1] - a
    if L == 0:
        d = np.hypot(rel[:, 0], rel[:, 1])
    else:
        d = np.abs(ab[0] * rel[:, 1] - ab[1] * rel[:, 0]) / L
    i = int(np.argmax(d)) + 1
    if d[i - 1] <= eps:
        return [0, len(points) - 1]
    left = _dp(points[:i + 1], eps)
    right = _dp(points[i:], eps)
    return left[:-1] + [j + i for j in right]


def simplify_closed(contour, max_vertices: int) -> list[tuple[int, int]]:
    pts = np.asarray(contour, dtype=float)
    if len(pts) <= max_vertices:
        return [tuple(map(int, p)) for p in pts]
    far = int(np.argmax(((pts - pts[0]) ** 2).sum(-1)))
    eps = 0.5
    while True:
        first = _dp(pts[:far + 1], eps)
        second = _dp(np.vstack([pts[far:], pts[:1]]), eps)
        keep = first[:-1] + [far + j for j in second[:-1]]
        if len(keep) <= max_vertices:
            return [tuple(map(int, pts[j])) for j in keep]
        eps *= 1.25


def _polygon_area(coords) -> float:
    c = np.asarray(coords, dtype=float)
    return 0.5 * abs(np.dot(c[:, 0], np.roll(c[:, 1], -1)) - np.dot(c[:, 1], np.roll(c[:, 0], -1)))


def _point(mask, cls) -> SparseAnnotation:
    return SparseAnnotation("point", cls, (interior_point(mask),))


def _line(mask, cls, policy, rng) -> SparseAnnotation | None:
    safe = ndimage.binary_erosion(mask, structure=_disk(policy.boundary_margin + policy.dilation_radius),
                                  border_value=0)
    ys, xs = np.nonzero(safe)
    if len(ys) < 2:
        return None
    for _ in range(50):
        i, j = rng.choice(len(ys), size=2, replace=False)
        p0 = np.array([xs[i], ys[i]], dtype=float)
        p1 = np.array([xs[j], ys[j]], dtype=float)
        length = np.hypot(*(p1 - p0))
        if length > policy.max_line_length:
            p1 = p0 + (p1 - p0) * policy.max_line_length / length
        a = (int(p0[0]), int(p0[1]))
        b = (int(round(p1[0])), int(round(p1[1])))
        if a == b:
            continue
        if all(safe[y, x] for x, y in bresenham(a, b)):
            return SparseAnnotation("line", cls, (a, b))
    return None


def _polygon(mask, cls, policy) -> SparseAnnotation | None:
    h, w = mask.shape
    for extra in range(4):
        core = ndimage.binary_erosion(mask, structure=_disk(policy.boundary_margin + extra), border_value=0)
        lab, n = ndimage.label(core, structure=_EIGHT)
        if n == 0:
            return None
        sizes = ndimage.sum_labels(core, lab, index=np.arange(1, n + 1))
        piece = lab == (int(np.argmax(sizes)) + 1)
        coords = simplify_closed(trace_contour(piece), policy.max_vertices)
        if len(set(coords)) < 3 or _polygon_area(coords) == 0:
            return None
        if not (fill_polygon(coords, h, w) & ~mask).any():
            return SparseAnnotation("polygon", cls, tuple(coords))
    return None


def simulate_scribbles(dense_labels: np.ndarray, policy: ScribblePolicy,
                       num_classes: int | None = None) -> tuple[list[SparseAnnotation], list[str]]:
    """Place up to ``objects_per_class`` annotations per class on distinct
    connected components.  Returns ``(annotations, warnings)``."""
    dense_labels = np.asarray(dense_labels)
    if (dense_labels == 255).any():
        raise ValidationError("simulate_scribbles needs a fully labeled map")
    k = int(num_classes if num_classes is not None else dense_labels.max() + 1)
    rng = np.random.default_rng(policy.seed)
    min_side = 2 * policy.boundary_margin + 1
    annotations: list[SparseAnnotation] = []
    warnings: list[str] = []
    for cls in range(k):
        lab, n = ndimage.label(dense_labels == cls, structure=_EIGHT)
        if n == 0:
            warnings.append(f"class {cls} absent from dense labels; no annotations placed")
            continue
        index = np.arange(1, n + 1)
        sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=index)
        centroids = np.array(ndimage.center_of_mass(np.ones_like(lab), lab, index=index))
        for c in farthest_point_order(centroids, sizes, policy.objects_per_class):
            comp = lab == (c + 1)
            ann = None
            if sizes[c] >= min_side * min_side:
                if policy.level == "line":
                    ann = _line(comp, cls, policy, rng)
                elif policy.level == "polygon":
                    ann = _polygon(comp, cls, policy)
            annotations.append(ann or _point(comp, cls))
    return annotations, warnings

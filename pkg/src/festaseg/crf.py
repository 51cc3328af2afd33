"""Fully connected CRF refinement by mean-field inference.

Pairwise potentials are Potts-weighted sums of an appearance kernel
``k1 = exp(-|dp|^2 / 2 theta1^2 - |dI|^2 / 2 theta2^2)`` and a smoothness kernel
``k2 = exp(-|dp|^2 / 2 theta3^2)``; positions are in pixels, colors in raw
0-255 intensities.

``mean_field_exact`` sums over all pixel pairs and is the reference.
``mean_field_fast`` filters with a separable Gaussian truncated at
``truncate`` standard deviations (k2) and a downsampled bilateral grid (k1).
Mean field amplifies small message errors near label ties, so the two paths
can disagree on individual pixels even though each message is close.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError, UsageError, ValidationError

EXACT_MAX_PIXELS = 4096


@dataclass
class CrfParams:
    theta1: float = 30.0
    theta2: float = 10.0
    theta3: float = 10.0
    w1: float = 1.0
    w2: float = 1.0
    iterations: int = 5
    truncate: float = 3.0

    def __post_init__(self):
        if min(self.theta1, self.theta2, self.theta3) <= 0:
            raise ParameterError("theta1, theta2, theta3 must be > 0")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.w1 < 0 or self.w2 < 0:
            raise ParameterError("kernel weights must be >= 0")


def check_probmap(probs: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ShapeError(f"probability map must be [H, W, K], got dims {list(probs.shape)}")
    if (probs < 0).any() or np.abs(probs.sum(axis=-1) - 1).max() > tol:
        raise ValidationError("probabilities must be non-negative and sum to 1 per pixel")
    return probs


def _check_image(image: np.ndarray, probs: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[:2] != probs.shape[:2]:
        raise ShapeError(f"image {image.shape[:2]} and probabilities {probs.shape[:2]} differ in size")
    return image


def unary_from_probs(probs: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    return -np.log(np.maximum(np.asarray(probs, dtype=np.float64), floor))


def _normalize(logq: np.ndarray) -> np.ndarray:
    z = logq - logq.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _potts_pairwise(messages: np.ndarray) -> np.ndarray:
    # sum over l' != l of message(l')
    return messages.sum(axis=-1, keepdims=True) - messages


def kernel_matrix(image: np.ndarray, params: CrfParams) -> np.ndarray:
    """Dense ``w1*k1 + w2*k2`` over all pixel pairs, zero on the diagonal."""
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    col = image.reshape(h * w, -1)
    n = h * w
    out = np.empty((n, n))
    for start in range(0, n, 512):
        sl = slice(start, min(n, start + 512))
        dp = ((pos[sl, None, :] - pos[None, :, :]) ** 2).sum(-1)
        di = ((col[sl, None, :] - col[None, :, :]) ** 2).sum(-1)
        out[sl] = (params.w1 * np.exp(-dp / (2 * params.theta1 ** 2) - di / (2 * params.theta2 ** 2))
                   + params.w2 * np.exp(-dp / (2 * params.theta3 ** 2)))
    np.fill_diagonal(out, 0.0)
    return out


def energy(labeling: np.ndarray, probs: np.ndarray, image: np.ndarray, params: CrfParams) -> float:
    """Unary costs plus Potts pairwise costs over ordered pairs ``i != j``."""
    probs = check_probmap(probs)
    image = _check_image(image, probs)
    labeling = np.asarray(labeling, dtype=np.int64)
    h, w, k = probs.shape
    if labeling.shape != (h, w):
        raise ShapeError("labeling and probabilities differ in size")
    if h * w > EXACT_MAX_PIXELS:
        raise UsageError(f"energy is evaluated exactly; at most {EXACT_MAX_PIXELS} pixels")
    unary = unary_from_probs(probs).reshape(h * w, k)
    lab = labeling.ravel()
    e_unary = unary[np.arange(h * w), lab].sum()
    kmat = kernel_matrix(image, params)
    onehot = np.eye(k)[lab]
    same = np.einsum("il,ij,jl->", onehot, kmat, onehot)
    return float(e_unary + kmat.sum() - same)


def mean_field_exact(probs: np.ndarray, image: np.ndarray, params: CrfParams | None = None) -> np.ndarray:
    """Synchronous mean-field updates with exact all-pairs message passing."""
    params = params or CrfParams()
    probs = check_probmap(probs)
    image = _check_image(image, probs)
    h, w, k = probs.shape
    if h * w > EXACT_MAX_PIXELS:
        raise UsageError(f"exact mean field is capped at {EXACT_MAX_PIXELS} pixels; use mean_field_fast")
    unary = unary_from_probs(probs).reshape(h * w, k)
    kmat = kernel_matrix(image, params)
    q = _normalize(-unary)
    for _ in range(params.iterations):
        q = _normalize(-unary - _potts_pairwise(kmat @ q))
    return q.reshape(h, w, k)


# -- fast path -----------------------------------------------------------------

def _gauss_taps(sigma: float, truncate: float) -> np.ndarray:
    r = int(math.ceil(truncate * sigma))
    d = np.arange(-r, r + 1)
    return np.exp(-d * d / (2 * sigma * sigma))


def smoothness_messages(q: np.ndarray, theta3: float, truncate: float = 3.0) -> np.ndarray:
    """``sum_{j != i} k2(i, j) q_j`` via separable truncated convolution."""
    taps = _gauss_taps(theta3, truncate)
    out = ndimage.convolve1d(q, taps, axis=0, mode="constant", cval=0.0)
    out = ndimage.convolve1d(out, taps, axis=1, mode="constant", cval=0.0)
    return out - q


class BilateralGrid:
    """Downsampled 5-D grid over (y, x, c1, c2, c3) for the appearance kernel.

    Cells are ``theta1/2`` pixels and ``theta2/2`` intensity units wide, so the
    kernel has a standard deviation of 2 cells on every axis.  Pixels are
    splatted to (and sliced from) their 32 surrounding vertices with
    multilinear weights; the blur runs in float32.  The grid spans only the bounding box of occupied
    vertices, which is exact for a truncated blur: nothing outside the box is
    ever splatted or sliced.
    """

    SIGMA_CELLS = 2.0

    def __init__(self, image: np.ndarray, theta1: float, theta2: float, truncate: float = 3.0):
        h, w = image.shape[:2]
        n = h * w
        yy, xx = np.mgrid[0:h, 0:w]
        coords = np.concatenate([
            np.stack([yy.ravel(), xx.ravel()], axis=1) / (theta1 / 2.0),
            image.reshape(n, -1) / (theta2 / 2.0),
        ], axis=1)
        dim = coords.shape[1]
        base = np.floor(coords).astype(np.int64)
        frac = coords - base
        base -= base.min(axis=0)
        self.shape = tuple(int(e) for e in base.max(axis=0) + 2)
        strides = np.ones(dim, dtype=np.int64)
        for d in range(dim - 2, -1, -1):
            strides[d] = strides[d + 1] * self.shape[d + 1]
        corners = np.array(np.meshgrid(*[[0, 1]] * dim, indexing="ij")).reshape(dim, -1).T
        self.keys = ((base[:, None, :] + corners[None, :, :]) * strides).sum(-1)
        self.weights = np.prod(np.where(corners[None] == 1, frac[:, None, :], 1 - frac[:, None, :]), axis=-1)

        radius = int(math.ceil(truncate * self.SIGMA_CELLS))
        self.blur_mats = []
        for e in self.shape:
            lag = np.subtract.outer(np.arange(e), np.arange(e))
            g = np.exp(-lag * lag / (2 * self.SIGMA_CELLS ** 2))
            g[np.abs(lag) > radius] = 0.0
            self.blur_mats.append(g.astype(np.float32))

        # splat -> blur -> slice response of a pixel to itself
        g1 = math.exp(-1 / (2 * self.SIGMA_CELLS ** 2))
        self.self_weight = np.prod((1 - frac) ** 2 + frac ** 2 + 2 * g1 * frac * (1 - frac), axis=1)

    def blur(self, grid: np.ndarray) -> np.ndarray:
        """Separable blur of a ``(K,) + shape`` grid along its last five axes."""
        full = grid.shape
        for axis, g in enumerate(self.blur_mats, start=1):
            e = full[axis]
            post = int(np.prod(full[axis + 1:]))
            if post == 1:
                grid = grid.reshape(-1, e) @ g.T
            else:
                grid = np.matmul(g, grid.reshape(-1, e, post))
        return grid.reshape(full)

    def filter(self, q: np.ndarray) -> np.ndarray:
        """Approximate ``sum_{j != i} k1(i, j) q_j`` for ``q`` of shape [N, K]."""
        size = int(np.prod(self.shape))
        k = q.shape[1]
        keys = self.keys.ravel()
        grid = np.empty((k, size), dtype=np.float32)
        for c in range(k):
            grid[c] = np.bincount(keys, weights=(self.weights * q[:, c:c + 1]).ravel(), minlength=size)
        grid = self.blur(grid.reshape((k,) + self.shape)).reshape(k, size)
        out = np.einsum("knp,np->nk", grid[:, self.keys].astype(np.float64), self.weights)
        return out - self.self_weight[:, None] * q


def mean_field_fast(probs: np.ndarray, image: np.ndarray, params: CrfParams | None = None) -> np.ndarray:
    params = params or CrfParams()
    probs = check_probmap(probs)
    image = _check_image(image, probs)
    h, w, k = probs.shape
    unary = unary_from_probs(probs)
    q = _normalize(-unary)
    if params.w1 == 0 and params.w2 == 0:
        return q
    grid = BilateralGrid(image, params.theta1, params.theta2, params.truncate) if params.w1 > 0 else None
    for _ in range(params.iterations):
        msg = np.zeros_like(q)
        if params.w2 > 0:
            msg += params.w2 * smoothness_messages(q, params.theta3, params.truncate)
        if grid is not None:
            msg += params.w1 * grid.filter(q.reshape(h * w, k)).reshape(h, w, k)
        q = _normalize(-unary - _potts_pairwise(msg))
    return q


def refine(probs: np.ndarray, image: np.ndarray, params: CrfParams | None = None,
           method: str = "fast", return_probs: bool = False):
    """Refined label map (argmax of the final marginals, ties to the smaller class)."""
    if method == "fast":
        q = mean_field_fast(probs, image, params)
    elif method == "exact":
        q = mean_field_exact(probs, image, params)
    else:
        raise ParameterError(f"unknown mean-field method {method!r}")
    labels = q.argmax(axis=-1).astype(np.uint8)
    return (labels, q) if return_probs else labels

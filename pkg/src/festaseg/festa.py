"""Feature/spatial relational regularizer and the supervised losses it is combined with.

For every anchor feature ``x_i`` three partners are picked on a detached copy
of the feature grid:

* ``nf`` - the most cosine-similar feature among all anchors (self excluded),
* ``ff`` - the least cosine-similar feature among all anchors,
* ``ns`` - the most cosine-similar of the (up to 8) adjacent grid positions.

The regularizer pulls ``x_i`` towards ``nf`` and ``ns`` (Euclidean distance)
and pushes it away from ``ff`` (cosine similarity).  Gradients reach both ends
of each pair but never the selection itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .annotations import UNLABELED
from .autodiff import Tensor
from .errors import LossError, ParameterError, SelectionError, ShapeError, ValidationError

LAMBDA_PRESETS = {"coarse": 0.1, "fine": 0.01}
TIE_TOL = 1e-12

# ascending linear-index order, so the first maximum is the smallest index
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class FestaConfig:
    alpha: float = 0.5
    beta: float = 1.5
    gamma: float = 1.0
    lam: float = 0.1
    n_max: int = 4096
    normalization: str = "mean"
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.normalization not in ("mean", "sum"):
            raise ParameterError(f"normalization must be 'mean' or 'sum', got {self.normalization!r}")
        if self.n_max < 2:
            raise ParameterError("n_max must be >= 2")

    @classmethod
    def preset(cls, name: str, **overrides) -> "FestaConfig":
        return cls(lam=LAMBDA_PRESETS[name], **overrides)


@dataclass
class NeighborSelection:
    anchors: np.ndarray
    nf: np.ndarray
    ff: np.ndarray
    ns: np.ndarray
    height: int
    width: int

    def offset(self, by: int) -> "NeighborSelection":
        return NeighborSelection(self.anchors + by, self.nf + by, self.ff + by, self.ns + by,
                                 self.height, self.width)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def cosine_similarity(a, b, epsilon: float = 1e-8) -> Tensor:
    """``dot(a, b) / (max(|a|, eps) * max(|b|, eps))`` along the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: lengths {a.dims} and {b.dims} differ")
    dot = ad.sum(ad.mul(a, b), axis=-1)
    denom = ad.mul(ad.clamp_min(ad.norm(a), epsilon), ad.clamp_min(ad.norm(b), epsilon))
    return ad.div(dot, denom)


def euclidean_distance(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"euclidean_distance: lengths {a.dims} and {b.dims} differ")
    return ad.norm(ad.sub(a, b))


def anchor_positions(h: int, w: int, n_max: int) -> np.ndarray:
    """All positions, or a uniform-stride grid of at most ``n_max`` of them."""
    if h * w <= n_max:
        return np.arange(h * w)
    stride = max(1, math.ceil(math.sqrt(h * w / n_max)))
    while math.ceil(h / stride) * math.ceil(w / stride) > n_max:
        stride += 1
    rows, cols = np.arange(0, h, stride), np.arange(0, w, stride)
    return (rows[:, None] * w + cols[None, :]).ravel()


def _first_within(values: np.ndarray, best: np.ndarray, sign: int) -> np.ndarray:
    # first column whose value ties the extreme within TIE_TOL
    hit = (values >= best[:, None] - TIE_TOL) if sign > 0 else (values <= best[:, None] + TIE_TOL)
    return hit.argmax(axis=1)


def select_neighbors(features, n_max: int = 4096, epsilon: float = 1e-8) -> NeighborSelection:
    """Pick nf / ff / ns partners for every anchor of an ``[h, w, C]`` grid."""
    f = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"select_neighbors expects [h, w, C], got dims {list(f.shape)}")
    h, w, c = f.shape
    if h * w < 2:
        raise SelectionError("feature grid has a single position; no candidates to select")
    x = f.reshape(h * w, c)
    unit = x / np.maximum(np.linalg.norm(x, axis=1), epsilon)[:, None]
    anchors = anchor_positions(h, w, n_max)
    ua = unit[anchors]
    sim = ua @ ua.T
    n = len(anchors)
    diag = np.arange(n)
    s = sim.copy()
    s[diag, diag] = -np.inf
    nf = anchors[_first_within(s, s.max(axis=1), +1)]
    s[diag, diag] = np.inf
    ff = anchors[_first_within(s, s.min(axis=1), -1)]

    r, col = np.divmod(anchors, w)
    nbr_sim = np.full((n, 8), -np.inf)
    nbr_idx = np.zeros((n, 8), dtype=np.int64)
    for k, (dr, dc) in enumerate(_OFFSETS):
        rr, cc = r + dr, col + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx = np.where(ok, rr * w + cc, 0)
        nbr_idx[:, k] = idx
        nbr_sim[:, k] = np.where(ok, (unit[idx] * ua).sum(axis=1), -np.inf)
    ns = nbr_idx[np.arange(n), _first_within(nbr_sim, nbr_sim.max(axis=1), +1)]
    return NeighborSelection(anchors, nf, ff, ns, h, w)


def festa_terms(features: Tensor, config: FestaConfig, selections=None) -> dict:
    """Per-term values of the regularizer.

    ``features`` is ``[h, w, C]`` or ``[B, h, w, C]``; a batch contributes the
    mean of its per-image losses.  ``selections`` (one per image) freezes the
    partner choice, otherwise it is recomputed from ``features``.
    """
    batched = features.ndim == 4
    fb = features.data if batched else features.data[None]
    b, h, w, c = fb.shape
    if selections is None:
        selections = [select_neighbors(fb[i], config.n_max, config.epsilon) for i in range(b)]
    elif isinstance(selections, NeighborSelection):
        selections = [selections]
    if len(selections) != b:
        raise ShapeError(f"{len(selections)} selections for a batch of {b}")
    sel = [s.offset(i * h * w) for i, s in enumerate(selections)]
    anchors = np.concatenate([s.anchors for s in sel])
    flat = ad.reshape(features, (b * h * w, c))
    xi = ad.take(flat, anchors)
    d_nf = euclidean_distance(xi, ad.take(flat, np.concatenate([s.nf for s in sel])))
    d_ns = euclidean_distance(xi, ad.take(flat, np.concatenate([s.ns for s in sel])))
    s_ff = cosine_similarity(xi, ad.take(flat, np.concatenate([s.ff for s in sel])), config.epsilon)
    norm = len(anchors) if config.normalization == "mean" else b
    terms = {
        "nf": ad.scale(ad.sum(d_nf), config.alpha / norm),
        "ns": ad.scale(ad.sum(d_ns), config.beta / norm),
        "ff": ad.scale(ad.sum(s_ff), config.gamma / norm),
    }
    terms["total"] = ad.add(ad.add(terms["nf"], terms["ns"]), terms["ff"])
    terms["selections"] = selections
    return terms


def festa_loss(features: Tensor, config: FestaConfig | None = None, selections=None) -> Tensor:
    return festa_terms(features, config or FestaConfig(), selections)["total"]


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, class_weights=None) -> Tensor:
    """Mean over labeled pixels of ``w_c * -log softmax(logits)_c``."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits dims {logits.dims} do not match label dims {list(labels.shape)}")
    lab = labels.reshape(-1)
    idx = np.flatnonzero(lab != UNLABELED)
    if len(idx) == 0:
        raise LossError("no labeled pixels; resample the batch")
    target = lab[idx].astype(np.int64)
    if target.max() >= k:
        raise ValidationError(f"label {target.max()} out of range for {k} classes")
    rows = ad.take(ad.reshape(logits, (lab.size, k)), idx)
    picked = ad.take(ad.log_softmax(rows), (np.arange(len(idx)), target))
    if class_weights is not None:
        wts = np.asarray(class_weights, dtype=logits.dtype)[target]
        picked = ad.mul(picked, Tensor(wts))
    return ad.scale(ad.sum(picked), -1.0 / len(idx))


def loss_terms(logits: Tensor, labels, features: Tensor, config: FestaConfig,
               class_weights=None) -> tuple[Tensor, Tensor, Tensor | None]:
    """``(total, ce, festa)``; ``festa`` is None and ``total is ce`` when lambda is 0."""
    ce = masked_cross_entropy(logits, labels, class_weights)
    if config.lam == 0:
        return ce, ce, None
    reg = festa_loss(features, config)
    return ad.add(ce, ad.scale(reg, config.lam)), ce, reg


def combined_loss(logits: Tensor, labels, features: Tensor, config: FestaConfig,
                  class_weights=None) -> Tensor:
    return loss_terms(logits, labels, features, config, class_weights)[0]


def class_weights_from_labels(labels: np.ndarray, num_classes: int, smoothing: float = 0.0) -> np.ndarray:
    """Inverse-frequency weights, rescaled to mean 1 over the classes present."""
    labels = np.asarray(labels)
    counts = np.bincount(labels[labels != UNLABELED].ravel().astype(np.int64),
                         minlength=num_classes)[:num_classes].astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise LossError("class weights need at least one labeled pixel")
    present = counts > 0
    weights = np.zeros(num_classes)
    weights[present] = total / (present.sum() * (counts[present] + smoothing))
    weights[present] /= weights[present].mean()
    return weights

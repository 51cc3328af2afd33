"""Mini-batch training with Nadam, sliding-window crops and plateau lr decay."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .annotations import UNLABELED
from .autodiff import Tensor
from .errors import DataError, LossError, ParameterError, ShapeError, TrainingError, UsageError
from .festa import FestaConfig, class_weights_from_labels, loss_terms, masked_cross_entropy
from .model import ModelConfig, forward, init_weights

HISTORY_COLUMNS = ("step", "train_loss", "val_loss", "lr")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 5
    crop: int = 64
    stride: int = 16
    max_steps: int = 200
    eval_every: int = 10
    plateau_patience: int = 10
    plateau_delta: float = 1e-4
    lr_decay_factor: float = 10.0
    max_decays: int = 2
    class_weighting: bool = False  # inverse-frequency CE weights
    weight_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.crop % 8 or self.crop <= 0:
            raise ParameterError(f"crop must be a positive multiple of 8, got {self.crop}")
        if self.stride < 1:
            raise ParameterError("stride must be >= 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ParameterError("lr must be finite and >= 0")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ParameterError("batch_size, eval_every must be >= 1 and max_steps >= 0")
        if self.lr_decay_factor <= 0:
            raise ParameterError("lr_decay_factor must be > 0")


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def nadam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Nadam update of ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name} at step {state.t + 1}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient of {name} has dims {g.shape}, parameter {params[name].shape}")
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        delta = lr * (beta1 * m_hat + (1 - beta1) * g / (1 - beta1 ** t)) / (np.sqrt(v_hat) + eps)
        p -= delta.astype(p.dtype)


def _corners(n: int, crop: int, stride: int) -> list[int]:
    out = list(range(0, n - crop + 1, stride))
    if out[-1] != n - crop:
        out.append(n - crop)
    return out


def make_crops(image: np.ndarray, labels: np.ndarray, crop: int, stride: int):
    """Sliding-window crops in row-major corner order, with right/bottom
    aligned extras so every pixel is covered."""
    h, w = labels.shape
    if image.shape[:2] != (h, w):
        raise ShapeError(f"image {image.shape[:2]} and labels {(h, w)} differ")
    if h < crop or w < crop:
        raise UsageError(f"image {h}x{w} is smaller than the {crop}x{crop} crop")
    return [(image[y:y + crop, x:x + crop], labels[y:y + crop, x:x + crop])
            for y in _corners(h, crop, stride) for x in _corners(w, crop, stride)]


def _as_float_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    history: list[tuple[int, float, float, float]]
    model: ModelConfig


def _crop_pool(dataset, cfg: TrainConfig):
    images, labels = [], []
    for image, lab in dataset:
        for ci, cl in make_crops(_as_float_image(image), np.asarray(lab), cfg.crop, cfg.stride):
            if (cl != UNLABELED).any():
                images.append(ci)
                labels.append(cl)
    return images, labels


def validation_loss(weights, model: ModelConfig, val_images, val_labels, class_weights=None) -> float:
    """Mean masked CE over validation crops that carry labels."""
    total = 0.0
    wts = {k: Tensor(v) for k, v in weights.items()}
    with ad.no_grad():
        for img, lab in zip(val_images, val_labels):
            out = forward(Tensor(img[None]), model, wts)
            total += masked_cross_entropy(out.logits, lab[None], class_weights).item()
    return total / len(val_images)


def train(train_set, val_set, model: ModelConfig, festa: FestaConfig, cfg: TrainConfig,
          history_path=None, log=None) -> TrainResult:
    """Train from a Glorot initialization seeded by ``cfg.seed``.

    ``train_set`` and ``val_set`` are sequences of ``(image, sparse labels)``.
    """
    images, labels = _crop_pool(train_set, cfg)
    if not images:
        raise DataError("no training crop contains a labeled pixel")
    val_images, val_labels = _crop_pool(val_set, cfg) if val_set else ([], [])

    class_weights = None
    if cfg.class_weighting:
        class_weights = class_weights_from_labels(np.stack(labels), model.num_classes, cfg.weight_smoothing)

    weights = {k: t.data for k, t in init_weights(model, seed=cfg.seed).items()}
    state = OptState()
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    lr = cfg.lr
    best = math.inf
    stale = 0
    decays = 0
    history = []
    for step in range(1, cfg.max_steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(int(i) for i in rng.permutation(len(images)))
        batch, order = order[:cfg.batch_size], order[cfg.batch_size:]
        x = Tensor(np.stack([images[i] for i in batch]))
        y = np.stack([labels[i] for i in batch])
        params = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
        out = forward(x, model, params)
        try:
            total, _, _ = loss_terms(out.logits, y, out.features, festa, class_weights)
        except LossError as exc:  # pragma: no cover - crops are filtered above
            raise DataError(str(exc)) from None
        loss = total.item()
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged to {loss} at step {step}")
        total.backward()
        nadam_step(weights, {k: p.grad for k, p in params.items()}, state, lr,
                   cfg.beta1, cfg.beta2, cfg.eps)

        val = float("nan")
        if val_images and step % cfg.eval_every == 0:
            val = validation_loss(weights, model, val_images, val_labels, class_weights)
            if val < best - cfg.plateau_delta:
                best, stale = val, 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience and decays < cfg.max_decays:
                    lr /= cfg.lr_decay_factor
                    decays += 1
                    stale = 0
        history.append((step, loss, val, lr))
        if log is not None and (step == 1 or step % cfg.eval_every == 0):
            log(f"step {step} loss {loss:.5f} val {val:.5f} lr {lr:.3g}")

    if history_path is not None:
        write_history(history_path, history)
    return TrainResult(weights, history, model)


def write_history(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for step, loss, val, lr in history:
            writer.writerow([step, repr(float(loss)), "" if math.isnan(val) else repr(float(val)), repr(float(lr))])

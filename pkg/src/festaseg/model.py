"""Three-block fully convolutional network with two-scale skip fusion.

    block1  2x(conv3x3 + relu), pool   -> 1/2
    block2  2x(conv3x3 + relu), pool   -> 1/4
    block3  2x(conv3x3 + relu), pool   -> 1/8
    features = up2(conv1x1(block3)) + conv1x1(block2)        (1/4, fuse_channels)
    logits   = up4(conv1x1(features))                          (full res, K)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError


@dataclass
class ModelConfig:
    num_classes: int = 5
    in_channels: int = 3
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    fuse_channels: int = 32

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ValidationError(f"exactly three block widths required, got {self.widths}")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = self.in_channels
        for b, width in enumerate(self.widths, start=1):
            for c in (1, 2):
                shapes[f"block{b}.conv{c}.kernel"] = (3, 3, cin, width)
                shapes[f"block{b}.conv{c}.bias"] = (width,)
                cin = width
        f = self.fuse_channels
        shapes["fuse.deep.kernel"] = (1, 1, self.widths[2], f)
        shapes["fuse.deep.bias"] = (f,)
        shapes["fuse.skip.kernel"] = (1, 1, self.widths[1], f)
        shapes["fuse.skip.bias"] = (f,)
        shapes["classifier.kernel"] = (1, 1, f, self.num_classes)
        shapes["classifier.bias"] = (self.num_classes,)
        return shapes

    @classmethod
    def from_weights(cls, weights) -> "ModelConfig":
        """Recover the architecture from the tensor shapes of a checkpoint."""
        def dims(name):
            return tuple(np.shape(getattr(weights[name], "data", weights[name])))
        try:
            widths = [dims(f"block{b}.conv1.kernel")[3] for b in (1, 2, 3)]
            cfg = cls(num_classes=dims("classifier.kernel")[3],
                      in_channels=dims("block1.conv1.kernel")[2],
                      widths=widths, fuse_channels=dims("fuse.deep.kernel")[3])
        except KeyError as exc:
            raise ValidationError(f"checkpoint lacks tensor {exc}") from None
        for name, shape in cfg.layer_shapes().items():
            if name not in weights:
                raise ValidationError(f"checkpoint lacks tensor '{name}'")
            if dims(name) != shape:
                raise ValidationError(f"tensor {name} has dims {dims(name)}, expected {shape}")
        return cfg


@dataclass
class ModelOutput:
    logits: Tensor
    features: Tensor


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in config.layer_shapes().items():
        if name.endswith(".kernel"):
            kh, kw, cin, cout = shape
            bound = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        weights[name] = Tensor(data.astype(dtype), requires_grad=True)
    return weights


def forward(image, config: ModelConfig, weights: dict[str, Tensor]) -> ModelOutput:
    """``image`` is ``[H, W, 3]`` or ``[B, H, W, 3]`` scaled to [0, 1]."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    h, w = x.shape[-3], x.shape[-2]
    if h % 8 or w % 8:
        raise ShapeError(f"input {h}x{w} must be divisible by 8")
    if x.shape[-1] != config.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, model expects {config.in_channels}")

    def conv(t, name):
        return ad.conv2d(t, weights[f"{name}.kernel"], weights[f"{name}.bias"])

    skip = None
    for b in (1, 2, 3):
        x = ad.relu(conv(x, f"block{b}.conv1"))
        x = ad.relu(conv(x, f"block{b}.conv2"))
        x = ad.maxpool2(x)
        if b == 2:
            skip = x
    features = ad.add(ad.upsample_bilinear(conv(x, "fuse.deep"), 2), conv(skip, "fuse.skip"))
    logits = ad.upsample_bilinear(conv(features, "classifier"), 4)
    return ModelOutput(logits, features)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_probs(image: np.ndarray, config: ModelConfig, weights) -> np.ndarray:
    """Class probabilities ``[H, W, K]`` for a uint8 or [0, 1] float image.

    Inputs whose sides are not multiples of 8 are edge-padded, then cropped back.
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    wts = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in weights.items()}
    with ad.no_grad():
        out = forward(Tensor(img.astype(np.float32)), config, wts)
    return softmax(out.logits.data.astype(np.float64))[:h, :w]

"""Desk-scale residual CNN standing in for the ResNet victims."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, Linear, Module
from .tensor import Tensor, as_tensor, no_grad, relu


@dataclass
class ClassifierConfig:
    image_channels: int = 1
    num_classes: int = 10
    widths: tuple[int, int, int] = (16, 32, 64)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _he(conv: Conv2d) -> Conv2d:
    conv.weight.data *= math.sqrt(6.0)
    return conv


class ResidualBlock(Module):
    """Two 3x3 convs plus shortcut.

    With ``downsample`` the first conv has stride 2 and the shortcut samples
    every other pixel before its 1x1 projection, as in ResNet.
    """

    def __init__(self, c_in: int, c_out: int, downsample: bool, rng: np.random.Generator):
        self.downsample = downsample
        self.conv1 = _he(Conv2d(c_in, c_out, 3, rng))
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.shortcut = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        if self.downsample:
            H, W = x.shape[-2:]
            if H % 2 or W % 2:
                raise F.GeometryError(f"stride-2 stage needs even extents, got {H}x{W}")
            c1 = self.conv1
            h = F.conv2d(F.pad_top_left(x, 1), c1.weight, c1.bias, stride=2)
            x = x[..., ::2, ::2]
        else:
            h = self.conv1(x)
        h = self.conv2(relu(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        return relu(h + skip)


class ResidualClassifier(Module):
    """stem -> three residual stages (stride-2 between stages) -> global pool -> logits."""

    def __init__(self, config: ClassifierConfig | None = None):
        self.config = config or ClassifierConfig()
        rng = np.random.default_rng(self.config.seed)
        w1, w2, w3 = self.config.widths
        self.stem = _he(Conv2d(self.config.image_channels, w1, 3, rng))
        self.stages = [
            ResidualBlock(w1, w1, False, rng),
            ResidualBlock(w1, w2, True, rng),
            ResidualBlock(w2, w3, True, rng),
        ]
        self.head = Linear(w3, self.config.num_classes, rng)

    def forward(self, x) -> Tensor:
        h = relu(self.stem(as_tensor(x)))
        for stage in self.stages:
            h = stage(h)
        return self.head(F.global_avg_pool(h))


def classify(x, model: ResidualClassifier) -> Tensor:
    return model(x)


def predict(model: Module, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
    """Arg-max labels for a numpy image batch, without recording gradients."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(images[start:start + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Module, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    if len(labels) == 0:
        return 0.0
    return 100.0 * float((predict(model, images) == labels).mean())

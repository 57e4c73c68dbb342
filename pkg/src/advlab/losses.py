from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, as_tensor, make_result


class LabelError(ValueError):
    pass


def charbonnier_loss(x: Tensor, y, eps: float = 1e-3) -> Tensor:
    """Mean of sqrt((x - y)^2 + eps^2); a smooth L1 that equals eps at x == y."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    y = as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"charbonnier shapes differ: {x.shape} vs {y.shape}")
    d = x.data - y.data
    # hypot keeps hypot(0, eps) == eps exactly
    r = np.hypot(d, eps)
    n = d.size
    data = np.asarray(r.mean())

    def fn(g):
        gd = g * (d / r) / n
        return gd, -gd

    return make_result(data, (x, y), fn)


def cross_entropy_loss(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]
                        or not np.issubdtype(labels.dtype, np.integer)):
        raise LabelError(f"labels must be integers in [0, {logits.shape[1]})")
    picked = F.log_softmax(logits, axis=1)[np.arange(len(labels)), labels]
    total = -picked.sum()
    return total * (1.0 / len(labels)) if reduction == "mean" else total

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad`` (missing grad = 0)."""
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} params but state tracks {len(state.m)}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"state shape {m.shape} != parameter shape {p.shape}")
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class Adam:
    params: list[Tensor]
    state: AdamState = field(init=False)

    def __post_init__(self) -> None:
        self.state = AdamState.for_params(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(epoch: int, epochs: int, start: float, end: float) -> float:
    """Cosine decay from ``start`` (first epoch) to ``end`` (last epoch), endpoints exact."""
    if epochs <= 1 or epoch <= 0:
        return start
    if epoch >= epochs - 1:
        return end
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))

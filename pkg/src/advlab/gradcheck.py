"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Element-wise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn: Callable[[], Tensor], target: Tensor, h: float,
                 coords: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``target.data``.

    Perturbs ``target.data`` in place and restores it. When ``coords`` is
    given only those flat positions are estimated; other entries are NaN.
    """
    flat = target.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if coords is None else coords
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(target.shape)


def analytic_grads(fn: Callable[[], Tensor], targets: Sequence[Tensor]) -> list[np.ndarray]:
    reset_tape()
    for t in targets:
        t.requires_grad = True
        t.grad = None
    loss = fn()
    backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in targets]


def max_gradient_error(fn: Callable[[], Tensor], targets: Sequence[Tensor], h: float = 1e-5,
                       max_coords: int | None = None, rng: np.random.Generator | None = None,
                       floor: float = 1e-6) -> float:
    """Largest element-wise relative error between tape and finite-difference gradients.

    ``max_coords`` caps how many coordinates of each target are probed
    (sampled with ``rng``); ``None`` probes all of them.
    """
    grads = analytic_grads(fn, targets)
    worst = 0.0
    for t, ga in zip(targets, grads):
        coords = None
        if max_coords is not None and t.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(t.size, size=max_coords, replace=False)
        gn = numeric_grad(fn, t, h, coords)
        mask = ~np.isnan(gn)
        if mask.any():
            worst = max(worst, float(relative_error(ga[mask], gn[mask], floor).max()))
    return worst

"""White-box L-infinity attacks: FGSM, PGD, BIM and MI-FGSM.

All four share one sign-gradient iteration so that the reductions
FGSM == PGD(1 step, alpha=eps, no random start), BIM == PGD(no random start)
and MI-FGSM(decay=0) == BIM hold bit for bit.  Gradients are taken of the
summed (untargeted) cross-entropy w.r.t. the input only; the classifier's
parameters are frozen for the duration and never receive gradients.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, replace
from typing import Iterator

import numpy as np

from .losses import cross_entropy_loss
from .nn import Module
from .tensor import Tensor, backward, reset_tape

FAMILIES = ("fgsm", "pgd", "mifgsm", "bim")

DEFAULT_STEPS = 10
DEFAULT_DECAY = 1.0


@dataclass(frozen=True)
class AttackSpec:
    family: str
    epsilon: float
    steps: int = DEFAULT_STEPS
    step_size: float | None = None
    decay: float = DEFAULT_DECAY
    random_start: bool | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        family = self.family.lower().replace("-", "").replace("_", "")
        if family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("family", family)
        eps = float(self.epsilon)
        if not eps >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        set_("epsilon", eps)
        if family == "fgsm":
            set_("steps", 1)
            set_("step_size", eps)
            set_("random_start", False)
            set_("decay", 0.0)
            return
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            set_("step_size", eps / 4)
        alpha = float(self.step_size)
        if alpha < 0 or alpha > eps or (eps > 0 and alpha == 0):
            raise ValueError(f"step size must satisfy 0 < alpha <= epsilon, got {alpha} vs {eps}")
        set_("step_size", alpha)
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        if family == "bim":
            set_("random_start", False)
        elif self.random_start is None:
            set_("random_start", family == "pgd")
        set_("decay", float(self.decay) if family == "mifgsm" else 0.0)

    def with_seed(self, seed: int) -> "AttackSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


@contextlib.contextmanager
def frozen(model: Module) -> Iterator[Module]:
    """Temporarily stop ``model``'s parameters from tracking gradients."""
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def input_gradient(classifier: Module, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(sum of per-sample cross-entropy)/dx; each row depends only on its own sample."""
    reset_tape()
    xt = Tensor(x, requires_grad=True)
    with frozen(classifier):
        loss = cross_entropy_loss(classifier(xt), labels, reduction="sum")
        backward(loss)
    return xt.grad if xt.grad is not None else np.zeros_like(x)


def _sign_iterate(x: np.ndarray, labels: np.ndarray, classifier: Module, epsilon: float,
                  step_size: float, steps: int, decay: float, random_start: bool,
                  momentum: bool, rng: np.random.Generator | None) -> np.ndarray:
    lo = x - epsilon
    hi = x + epsilon
    adv = x.copy()
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        adv = np.clip(x + rng.uniform(-epsilon, epsilon, size=x.shape), 0.0, 1.0)
    velocity = np.zeros_like(x)
    for _ in range(steps):
        grad = input_gradient(classifier, adv, labels)
        if momentum:
            l1 = np.abs(grad).sum(axis=tuple(range(1, grad.ndim)), keepdims=True)
            safe = np.where(l1 > 0, l1, 1.0)
            # zero-gradient samples skip normalization: velocity <- decay * velocity
            velocity = decay * velocity + np.where(l1 > 0, grad / safe, 0.0)
            direction = np.sign(velocity)
        else:
            direction = np.sign(grad)
        adv = adv + step_size * direction
        adv = np.clip(np.clip(adv, lo, hi), 0.0, 1.0)
    return adv


def fgsm(x, labels, classifier: Module, spec: AttackSpec,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """clamp(x + eps * sign(grad_x CE), 0, 1)."""
    return _sign_iterate(np.asarray(x, dtype=np.float64), np.asarray(labels), classifier,
                         spec.epsilon, spec.epsilon, 1, 0.0, False, False, None)


def pgd(x, labels, classifier: Module, spec: AttackSpec,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Sign-gradient ascent projected onto the eps-ball intersected with [0, 1]."""
    if rng is None and spec.random_start:
        rng = np.random.default_rng(spec.seed)
    return _sign_iterate(np.asarray(x, dtype=np.float64), np.asarray(labels), classifier,
                         spec.epsilon, spec.step_size, spec.steps, 0.0, bool(spec.random_start),
                         False, rng)


def bim(x, labels, classifier: Module, spec: AttackSpec,
        rng: np.random.Generator | None = None) -> np.ndarray:
    return pgd(x, labels, classifier, replace(spec, random_start=False), rng)


def mifgsm(x, labels, classifier: Module, spec: AttackSpec,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Momentum iterative FGSM with per-sample L1-normalized gradient accumulation."""
    return _sign_iterate(np.asarray(x, dtype=np.float64), np.asarray(labels), classifier,
                         spec.epsilon, spec.step_size, spec.steps, spec.decay, False, True, None)


_DISPATCH = {"fgsm": fgsm, "pgd": pgd, "bim": bim, "mifgsm": mifgsm}


def run_attack(spec: AttackSpec, x, labels, classifier: Module,
               rng: np.random.Generator | None = None, batch_size: int = 100) -> np.ndarray:
    """Attack ``x`` in chunks of ``batch_size``; chunking does not change the result
    except through the random start, which draws from ``rng`` chunk by chunk."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if spec.random_start and rng is None:
        rng = np.random.default_rng(spec.seed)
    attack = _DISPATCH[spec.family]
    out = [attack(x[i:i + batch_size], labels[i:i + batch_size], classifier, spec, rng)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else x.copy()

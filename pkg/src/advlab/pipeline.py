"""Two-phase defense training, inference-time defense and evaluation.

Phase 1 trains the denoiser to map attacked images back to their clean
originals (Charbonnier loss) while the classifier stays frozen.  Phase 2
fine-tunes the classifier on attacked-then-denoised images mixed with clean
ones while the denoiser stays frozen.  Both phases verify the frozen model's
byte checksum before returning.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attacks import AttackSpec, run_attack
from .classifier import ClassifierConfig, ResidualClassifier, accuracy
from .denoiser import Denoiser, DenoiserConfig, NonFiniteError
from .io.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .io.datasets import DatasetHandle
from .losses import charbonnier_loss, cross_entropy_loss
from .nn import Module
from .optim import Adam, cosine_lr
from .tensor import backward, no_grad, reset_tape
from .wavelet import mean_subband_fractions

PHASES = ("classifier", "denoiser", "retrain")

CSV_HEADER = ("dataset", "attack", "epsilon", "steps", "step_size", "decay",
              "clean_acc", "attacked_acc", "defended_acc", "defended_retrained_acc")
ABLATION_HEADER = ("ablation", "arm") + CSV_HEADER


class FrozenIntegrityError(RuntimeError):
    """A model that was meant to stay frozen changed during training."""


@dataclass
class TrainConfig:
    phase: str
    epochs: int
    batch_size: int
    lr_start: float = 0.004
    lr_end: float = 0.0005
    charbonnier_eps: float = 1e-3
    seed: int = 0
    attack_mix: tuple[AttackSpec, ...] = ()
    clean_mix_ratio: float = 1.0
    # phase 1 only: redraw attacked inputs every epoch instead of once
    regenerate_attacks: bool = False

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier_eps must be positive")
        if not 0.0 <= self.clean_mix_ratio <= 1.0:
            raise ValueError("clean_mix_ratio must lie in [0, 1]")
        self.attack_mix = tuple(self.attack_mix)
        if self.phase in ("denoiser", "retrain") and not self.attack_mix:
            raise ValueError(f"attack_mix must not be empty for phase {self.phase!r}")

    def lr(self, epoch: int) -> float:
        return cosine_lr(epoch, self.epochs, self.lr_start, self.lr_end)


@dataclass
class TrainResult:
    model: Module
    epoch_losses: list[float]
    step_losses: list[float]
    lrs: list[float]
    frozen_checksum: str | None = None

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "lr", "mean_loss"))
        for epoch, (lr, loss) in enumerate(zip(self.lrs, self.epoch_losses)):
            w.writerow((epoch, repr(lr), repr(loss)))
        return buf.getvalue()


def _rng(seed: int, phase: str) -> np.random.Generator:
    return np.random.default_rng([seed, PHASES.index(phase)])


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(value: float, what: str, epoch: int, step: int, extra: str = "") -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite {what} at epoch {epoch} step {step}{extra}")


def _sample_spec(mix: Sequence[AttackSpec], rng: np.random.Generator) -> AttackSpec:
    spec = mix[int(rng.integers(len(mix)))]
    return spec.with_seed(int(rng.integers(2 ** 31)))


def _verify_frozen(model: Module, before: str, role: str) -> str:
    after = model.checksum()
    if after != before:
        raise FrozenIntegrityError(f"{role} parameters changed during training")
    return after


# -- phase 0: the victim classifier --------------------------------------------------


def train_classifier(data: DatasetHandle, config: TrainConfig,
                     model_config: ClassifierConfig | None = None,
                     log: Callable[[str], None] | None = None) -> TrainResult:
    if config.phase != "classifier":
        raise ValueError("train_classifier needs a TrainConfig with phase='classifier'")
    model_config = model_config or ClassifierConfig(image_channels=data.channels, seed=config.seed)
    model = ResidualClassifier(model_config)
    rng = _rng(config.seed, "classifier")
    opt = Adam(model.parameters())
    result = TrainResult(model, [], [], [])
    for epoch in range(config.epochs):
        lr = config.lr(epoch)
        losses = []
        for step, idx in enumerate(_batches(len(data), config.batch_size, rng)):
            reset_tape()
            opt.zero_grad()
            loss = cross_entropy_loss(model(data.images[idx]), data.labels[idx])
            _check_finite(loss.item(), "classifier loss", epoch, step)
            backward(loss)
            opt.step(lr)
            losses.append(loss.item())
        result.step_losses += losses
        result.epoch_losses.append(float(np.mean(losses)))
        result.lrs.append(lr)
        if log:
            log(f"classifier epoch {epoch} lr={lr:.6g} loss={result.epoch_losses[-1]:.6f}")
    return result


# -- phase 1: denoiser ---------------------------------------------------------------


def build_attack_pool(images: np.ndarray, labels: np.ndarray, classifier: Module,
                      mix: Sequence[AttackSpec], batch_size: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Attack ``images`` chunk by chunk, drawing one spec from ``mix`` per chunk."""
    out, families = [], []
    for start in range(0, len(images), batch_size):
        spec = _sample_spec(mix, rng)
        chunk = slice(start, start + batch_size)
        out.append(run_attack(spec, images[chunk], labels[chunk], classifier,
                              batch_size=batch_size))
        families.append(spec.family)
    return np.concatenate(out), families


def train_denoiser(data: DatasetHandle, classifier: Module, config: TrainConfig,
                   denoiser_config: DenoiserConfig | None = None,
                   log: Callable[[str], None] | None = None) -> TrainResult:
    """Minimize charbonnier(denoise(x_adv), x) with ``classifier`` frozen.

    Because the classifier never changes, the attacked inputs are generated
    once up front unless ``config.regenerate_attacks`` is set.
    """
    if config.phase != "denoiser":
        raise ValueError("train_denoiser needs a TrainConfig with phase='denoiser'")
    denoiser_config = denoiser_config or DenoiserConfig(image_channels=data.channels, seed=config.seed)
    model = Denoiser(denoiser_config)
    rng = _rng(config.seed, "denoiser")
    before = classifier.checksum()
    opt = Adam(model.parameters())
    result = TrainResult(model, [], [], [])
    pool = None
    for epoch in range(config.epochs):
        if pool is None or config.regenerate_attacks:
            pool, families = build_attack_pool(data.images, data.labels, classifier,
                                               config.attack_mix, config.batch_size, rng)
            if log:
                counts = {f: families.count(f) for f in sorted(set(families))}
                log(f"denoiser epoch {epoch} attack pool ready {counts}")
        lr = config.lr(epoch)
        losses = []
        for step, idx in enumerate(_batches(len(data), config.batch_size, rng)):
            reset_tape()
            opt.zero_grad()
            loss = charbonnier_loss(model(pool[idx]), data.images[idx], config.charbonnier_eps)
            _check_finite(loss.item(), "denoiser loss", epoch, step, f" (lr={lr:.6g})")
            backward(loss)
            opt.step(lr)
            losses.append(loss.item())
        result.step_losses += losses
        result.epoch_losses.append(float(np.mean(losses)))
        result.lrs.append(lr)
        if log:
            log(f"denoiser epoch {epoch} lr={lr:.6g} loss={result.epoch_losses[-1]:.6f}")
    result.frozen_checksum = _verify_frozen(classifier, before, "classifier")
    return result


def denoise_batches(denoiser: Module, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Inference-time defense on a numpy batch, no gradient recording."""
    with no_grad():
        out = [denoiser(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else images.copy()


# -- phase 2: adversarial retraining -------------------------------------------------


def retrain_classifier(data: DatasetHandle, denoiser: Module, classifier: Module,
                       config: TrainConfig,
                       log: Callable[[str], None] | None = None) -> TrainResult:
    """Fine-tune a copy of ``classifier`` on denoise(x_adv) plus clean images.

    Attacks are regenerated per batch against the classifier being trained.
    ``classifier`` itself is left untouched; the result holds the new model.
    """
    if config.phase != "retrain":
        raise ValueError("retrain_classifier needs a TrainConfig with phase='retrain'")
    model = clone_model(classifier)
    rng = _rng(config.seed, "retrain")
    before = denoiser.checksum()
    opt = Adam(model.parameters())
    result = TrainResult(model, [], [], [])
    for epoch in range(config.epochs):
        lr = config.lr(epoch)
        losses = []
        for step, idx in enumerate(_batches(len(data), config.batch_size, rng)):
            x, y = data.images[idx], data.labels[idx]
            spec = _sample_spec(config.attack_mix, rng)
            x_adv = run_attack(spec, x, y, model, batch_size=len(idx))
            x_def = denoise_batches(denoiser, x_adv, batch_size=len(idx))
            n_clean = int(round(config.clean_mix_ratio * len(idx)))
            inputs = np.concatenate([x[:n_clean], x_def])
            targets = np.concatenate([y[:n_clean], y])
            reset_tape()
            opt.zero_grad()
            loss = cross_entropy_loss(model(inputs), targets)
            _check_finite(loss.item(), "retrain loss", epoch, step, f" (attack={spec.family})")
            backward(loss)
            opt.step(lr)
            losses.append(loss.item())
        result.step_losses += losses
        result.epoch_losses.append(float(np.mean(losses)))
        result.lrs.append(lr)
        if log:
            log(f"retrain epoch {epoch} lr={lr:.6g} loss={result.epoch_losses[-1]:.6f}")
    result.frozen_checksum = _verify_frozen(denoiser, before, "denoiser")
    return result


# -- evaluation ----------------------------------------------------------------------


@dataclass
class EvalRow:
    attack: str
    epsilon: float
    steps: int
    step_size: float
    decay: float
    clean_accuracy: float
    attacked_accuracy: float
    defended_accuracy: float | None = None
    defended_retrained_accuracy: float | None = None

    def csv_fields(self, dataset: str) -> list[str]:
        def acc(v):
            return "" if v is None else f"{v:.2f}"
        return [dataset, self.attack, f"{self.epsilon:g}", str(self.steps), f"{self.step_size:g}",
                f"{self.decay:g}", acc(self.clean_accuracy), acc(self.attacked_accuracy),
                acc(self.defended_accuracy), acc(self.defended_retrained_accuracy)]


@dataclass
class EvalReport:
    dataset: str
    rows: list[EvalRow]
    subbands: dict[str, dict[str, float]] = field(default_factory=dict)
    attack_specs: list[dict] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)
    timestamp: float = field(default_factory=time.time)
    retrained_clean_accuracy: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows:
            w.writerow(row.csv_fields(self.dataset))
        return buf.getvalue()

    def sidecar(self) -> dict:
        """Everything that is not part of the fixed CSV schema."""
        return {
            "dataset": self.dataset,
            "timestamp": self.timestamp,
            "seeds": self.seeds,
            "attack_specs": self.attack_specs,
            "subband_fractions": self.subbands,
            "retrained_clean_accuracy": self.retrained_clean_accuracy,
            "rows": [asdict(r) for r in self.rows],
        }

    def write(self, csv_path: str | Path) -> None:
        """CSV at ``csv_path`` plus a JSON sidecar next to it. The CSV alone is deterministic."""
        p = Path(csv_path)
        p.write_text(self.to_csv())
        p.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    def row(self, attack: str) -> EvalRow:
        for r in self.rows:
            if r.attack == attack:
                return r
        raise KeyError(attack)


def evaluate(data: DatasetHandle, classifier: Module, attacks: Sequence[AttackSpec],
             denoiser: Module | None = None, retrained: Module | None = None,
             batch_size: int = 100, seed: int = 0,
             log: Callable[[str], None] | None = None) -> EvalReport:
    """Clean, attacked, defended and defended+retrained top-1 accuracy per attack.

    ``attacked`` and ``defended`` use attacks crafted against ``classifier``;
    ``defended_retrained`` uses attacks crafted against ``retrained`` and the same
    denoiser, so each column faces a white-box attacker on its own classifier.
    """
    if not attacks:
        raise ValueError("evaluate needs at least one attack")
    x, y = data.images, data.labels
    clean = accuracy(classifier, x, y)
    report = EvalReport(data.name, [], seeds={"eval": seed})
    if retrained is not None:
        report.retrained_clean_accuracy = accuracy(retrained, x, y)
    for spec in attacks:
        spec = spec.with_seed(seed) if spec.random_start else spec
        adv = run_attack(spec, x, y, classifier, batch_size=batch_size)
        row = EvalRow(spec.family, spec.epsilon, spec.steps, spec.step_size, spec.decay,
                      clean, accuracy(classifier, adv, y))
        if denoiser is not None:
            row.defended_accuracy = accuracy(classifier, denoise_batches(denoiser, adv, batch_size), y)
            if retrained is not None:
                adv_r = run_attack(spec, x, y, retrained, batch_size=batch_size)
                row.defended_retrained_accuracy = accuracy(
                    retrained, denoise_batches(denoiser, adv_r, batch_size), y)
        report.rows.append(row)
        report.attack_specs.append(spec.to_dict())
        report.subbands[spec.family] = mean_subband_fractions(x, adv).as_dict()
        if log:
            log(f"eval {spec.family} eps={spec.epsilon:g}: " + ",".join(row.csv_fields(data.name)[6:]))
    return report


def analyze_subbands(data: DatasetHandle, classifier: Module,
                     attacks: Sequence[AttackSpec], batch_size: int = 100) -> dict[str, dict]:
    """Mean per-image subband energy fractions of each attack's perturbation."""
    out = {}
    for spec in attacks:
        adv = run_attack(spec, data.images, data.labels, classifier, batch_size=batch_size)
        profile = mean_subband_fractions(data.images, adv)
        out[spec.family] = dict(profile.as_dict(), detail_fraction=profile.detail_fraction,
                                epsilon=spec.epsilon, images=len(data))
    return out


# -- ablations -----------------------------------------------------------------------


def ablation_rows(name: str, arms: dict[str, EvalReport],
                  column: Callable[[str, EvalRow], EvalRow] | None = None) -> list[list[str]]:
    rows = []
    for arm, report in arms.items():
        for r in report.rows:
            r = column(arm, r) if column else r
            rows.append([name, arm] + r.csv_fields(report.dataset))
    return rows


def ablation_suite(data: DatasetHandle, classifier: Module, attacks: Sequence[AttackSpec],
                   denoiser: Module, retrained: Module,
                   head_denoisers: dict[int, Module], seed: int = 0,
                   log: Callable[[str], None] | None = None) -> str:
    """Side-by-side CSV: {no-retrain vs full} and one arm per entry of ``head_denoisers``.

    The retraining ablation shares one evaluation: the no-retrain arm blanks the
    retrained column.  Head arms evaluate denoiser-only defense.
    """
    full = evaluate(data, classifier, attacks, denoiser, retrained, seed=seed, log=log)

    def strip(arm: str, r: EvalRow) -> EvalRow:
        if arm != "no-retrain":
            return r
        return EvalRow(**{**asdict(r), "defended_retrained_accuracy": None})

    rows = ablation_rows("retrain", {"no-retrain": full, "full": full}, strip)
    heads = {f"heads={h}": evaluate(data, classifier, attacks, d, seed=seed, log=log)
             for h, d in sorted(head_denoisers.items())}
    rows += ablation_rows("heads", heads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    w.writerows(rows)
    return buf.getvalue()


# -- model persistence ---------------------------------------------------------------


def clone_model(model: Module) -> Module:
    return model_from_tensors(model_tensors(model))


def model_tensors(model: Module) -> dict[str, np.ndarray]:
    """Parameters plus ``config.*`` scalars, enough to rebuild the model."""
    cfg = model.config.to_dict()
    out = {f"config.{k}": np.asarray(v, dtype=np.float64) for k, v in cfg.items()}
    out.update(model.state_dict())
    return out


def model_from_tensors(tensors: dict[str, np.ndarray]) -> Module:
    cfg = {k[len("config."):]: v for k, v in tensors.items() if k.startswith("config.")}
    state = {k: v for k, v in tensors.items() if not k.startswith("config.")}
    if "embed_dim" in cfg:
        cls, config_cls = Denoiser, DenoiserConfig
    elif "num_classes" in cfg:
        cls, config_cls = ResidualClassifier, ClassifierConfig
    else:
        raise CheckpointError("checkpoint has no recognizable config.* entries")
    kwargs = {}
    for f in fields(config_cls):
        if f.name not in cfg:
            raise CheckpointError(f"checkpoint is missing config.{f.name}")
        v = cfg[f.name]
        kwargs[f.name] = tuple(int(i) for i in v) if v.ndim else int(v)
    model = cls(config_cls(**kwargs))
    try:
        model.load_state_dict(state, strict=True)
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"checkpoint does not match its config: {err}") from None
    return model


def save_model(path: str | Path, model: Module) -> None:
    save_checkpoint(path, model_tensors(model))


def load_model(path: str | Path, kind: type | None = None) -> Module:
    model = model_from_tensors(load_checkpoint(path))
    if kind is not None and not isinstance(model, kind):
        raise CheckpointError(f"{path} holds a {type(model).__name__}, expected {kind.__name__}")
    return model


__all__ = [
    "ABLATION_HEADER", "CSV_HEADER", "EvalReport", "EvalRow", "FrozenIntegrityError",
    "TrainConfig", "TrainResult", "ablation_suite", "analyze_subbands", "build_attack_pool",
    "clone_model", "denoise_batches", "evaluate", "load_model", "model_from_tensors",
    "model_tensors", "retrain_classifier", "save_model", "train_classifier", "train_denoiser",
]

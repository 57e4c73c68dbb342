"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, lists are comma-separated and an
empty value means "unset" for optional fields. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

# (train, test) L-infinity budgets per dataset
DATASET_EPSILON = {
    "mnist": (0.3, 0.2),
    "fmnist": (0.3, 0.1),
    "cifar10": (0.15, 0.05),
    "synthetic": (0.3, 0.3),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    data_dir: str | None = None
    out: str = "runs/desk"
    seed: int = 0
    train_subset: int = 2000
    test_subset: int = 500

    classifier_epochs: int = 4
    classifier_batch_size: int = 64
    denoiser_epochs: int = 3
    denoiser_batch_size: int = 16
    retrain_epochs: int = 2
    retrain_batch_size: int = 32
    lr_start: float = 0.004
    lr_end: float = 0.0005
    retrain_lr_start: float = 0.0005
    retrain_lr_end: float = 0.0001
    charbonnier_eps: float = 1e-3
    clean_mix_ratio: float = 1.0

    embed_dim: int = 16
    heads: int = 4
    scales: int = 3
    blocks_per_stage: int = 1
    gdfn_expansion: int = 2

    train_epsilon: float | None = None
    test_epsilon: float | None = None
    attack_mix: list[str] = field(default_factory=lambda: ["fgsm", "pgd", "mifgsm", "bim"])
    attacks: list[str] = field(default_factory=lambda: ["fgsm", "pgd", "mifgsm", "bim"])
    attack_steps: int = 10
    attack_step_fraction: float = 0.25
    attack_decay: float = 1.0
    pgd_random_start: bool = True

    ablation_heads: list[int] = field(default_factory=lambda: [1, 4])

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.dataset not in DATASET_EPSILON:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if not self.retrain_lr_start >= self.retrain_lr_end > 0:
            raise ConfigError("need retrain_lr_start >= retrain_lr_end > 0")
        if not self.attack_mix:
            raise ConfigError("attack_mix must not be empty")
        if self.charbonnier_eps <= 0:
            raise ConfigError("charbonnier_eps must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")
        if not 0 < self.attack_step_fraction <= 1:
            raise ConfigError("attack_step_fraction must lie in (0, 1]")

    @property
    def epsilons(self) -> tuple[float, float]:
        train, test = DATASET_EPSILON[self.dataset]
        return (train if self.train_epsilon is None else self.train_epsilon,
                test if self.test_epsilon is None else self.test_epsilon)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_HINTS = typing.get_type_hints(RunConfig)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, text: str):
    hint = _HINTS[key]
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if text == "":
            return None
        hint = next(a for a in args if a is not type(None))
    origin = typing.get_origin(hint)
    try:
        if origin is list:
            (inner,) = typing.get_args(hint)
            return [inner(item.strip()) for item in text.split(",") if item.strip()]
        if hint is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return hint(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None


def dumps(config: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


def parse_overrides(text: str) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, value)
    return values


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides = parse_overrides(text)
    base = base or RunConfig()
    return dataclasses.replace(base, **overrides)


def load_config(path: str | os.PathLike) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing config file: {p}")
    return loads(p.read_text())

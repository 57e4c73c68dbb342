"""Command-line driver for the desk experiments.

Every subcommand reads a RunConfig (``--config`` plus flag overrides) and
writes its artifacts under ``--out``.  Failures print exactly one JSON line
on stderr, ``{"error": kind, "exit_code": n, "message": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .attacks import AttackSpec
from .classifier import ClassifierConfig, ResidualClassifier, accuracy
from .denoiser import Denoiser, DenoiserConfig, NonFiniteError
from .io.checkpoint import CheckpointError
from .io.config import ConfigError, RunConfig, dumps, load_config
from .io.datasets import DatasetFormatError, DatasetHandle, load_dataset

log = logging.getLogger("advlab")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_BAD_DATA = 5
EXIT_NUMERIC = 6

CLASSIFIER_CKPT = "classifier.tdcp"
DENOISER_CKPT = "denoiser.tdcp"
RETRAINED_CKPT = "classifier_retrained.tdcp"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", help="mnist, fmnist, cifar10 or synthetic")
    p.add_argument("--data-dir", help="directory holding the raw dataset files")
    p.add_argument("--epsilon", type=float, help="attack budget for training and evaluation")
    p.add_argument("--attack", help="comma-separated attack families")
    p.add_argument("--seed", type=int)
    p.add_argument("--subset", help="N caps both splits; N,M caps train and test separately")
    p.add_argument("--out", help="output directory")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")


COMMANDS = {
    "train-classifier": "train the victim classifier",
    "train-denoiser": "phase 1: train the denoiser against the frozen classifier",
    "retrain": "phase 2: retrain the classifier on denoised adversarial images",
    "attack-eval": "accuracy report: clean, attacked, defended, defended+retrained",
    "ablate": "retraining and attention-heads ablations as one CSV",
    "analyze-subbands": "wavelet subband energy of attack perturbations",
    "dump-defaults": "print the effective config as key = value text",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advlab", description=__doc__.splitlines()[0])
    parser.add_argument("--dump-defaults", action="store_true", help="same as the dump-defaults command")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, help_text in COMMANDS.items():
        _common(sub.add_parser(name, help=help_text, description=help_text))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes: dict = {}
    if getattr(args, "dataset", None):
        changes["dataset"] = args.dataset
    if getattr(args, "data_dir", None):
        changes["data_dir"] = args.data_dir
    if getattr(args, "epsilon", None) is not None:
        changes["train_epsilon"] = changes["test_epsilon"] = args.epsilon
    if getattr(args, "attack", None):
        families = [a.strip() for a in args.attack.split(",") if a.strip()]
        changes["attacks"] = changes["attack_mix"] = families
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "subset", None):
        try:
            parts = [int(v) for v in args.subset.split(",")]
        except ValueError:
            raise ConfigError(f"invalid --subset {args.subset!r}") from None
        if len(parts) not in (1, 2) or min(parts) < 1:
            raise ConfigError(f"invalid --subset {args.subset!r}")
        changes["train_subset"] = parts[0]
        changes["test_subset"] = parts[-1] if len(parts) == 2 else min(cfg.test_subset, parts[0])
    if getattr(args, "out", None):
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def attack_specs(cfg: RunConfig, families, epsilon: float) -> list[AttackSpec]:
    specs = []
    for family in families:
        try:
            specs.append(AttackSpec(family, epsilon, steps=cfg.attack_steps,
                                    step_size=cfg.attack_step_fraction * epsilon,
                                    decay=cfg.attack_decay,
                                    random_start=cfg.pgd_random_start if family == "pgd" else None,
                                    seed=cfg.seed))
        except ValueError as err:
            raise ConfigError(str(err)) from None
    return specs


def _data(cfg: RunConfig, split: str) -> DatasetHandle:
    subset = cfg.train_subset if split == "train" else cfg.test_subset
    return load_dataset(cfg.dataset, split, cfg.data_dir, subset=subset, seed=cfg.seed)


def _train_config(cfg: RunConfig, phase: str) -> pipeline.TrainConfig:
    train_eps = cfg.epsilons[0]
    if phase == "classifier":
        return pipeline.TrainConfig("classifier", cfg.classifier_epochs, cfg.classifier_batch_size,
                                    cfg.lr_start, cfg.lr_end, seed=cfg.seed)
    if phase == "denoiser":
        return pipeline.TrainConfig("denoiser", cfg.denoiser_epochs, cfg.denoiser_batch_size,
                                    cfg.lr_start, cfg.lr_end, cfg.charbonnier_eps, cfg.seed,
                                    attack_specs(cfg, cfg.attack_mix, train_eps))
    return pipeline.TrainConfig("retrain", cfg.retrain_epochs, cfg.retrain_batch_size,
                                cfg.retrain_lr_start, cfg.retrain_lr_end, cfg.charbonnier_eps,
                                cfg.seed, attack_specs(cfg, cfg.attack_mix, train_eps),
                                cfg.clean_mix_ratio)


def _denoiser_config(cfg: RunConfig, channels: int, heads: int | None = None) -> DenoiserConfig:
    try:
        return DenoiserConfig(cfg.embed_dim, heads or cfg.heads, cfg.scales, cfg.blocks_per_stage,
                              cfg.gdfn_expansion, channels, cfg.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dumps(cfg))
    return out


def _load(path: Path, kind: type):
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return pipeline.load_model(path, kind)


def _optional(path: Path, kind: type):
    return pipeline.load_model(path, kind) if path.is_file() else None


def _save_training(out: Path, stem: str, result: pipeline.TrainResult) -> None:
    (out / f"{stem}_loss.csv").write_text(result.loss_csv())


# -- subcommands ---------------------------------------------------------------------


def cmd_train_classifier(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    train = _data(cfg, "train")
    model_cfg = ClassifierConfig(image_channels=train.channels, seed=cfg.seed)
    result = pipeline.train_classifier(train, _train_config(cfg, "classifier"), model_cfg, log=log.info)
    pipeline.save_model(out / CLASSIFIER_CKPT, result.model)
    _save_training(out, "classifier", result)
    test = _data(cfg, "test")
    log.info("clean test accuracy %.2f%%", accuracy(result.model, test.images, test.labels))
    return EXIT_OK


def cmd_train_denoiser(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    classifier = _load(out / CLASSIFIER_CKPT, ResidualClassifier)
    train = _data(cfg, "train")
    result = pipeline.train_denoiser(train, classifier, _train_config(cfg, "denoiser"),
                                     _denoiser_config(cfg, train.channels), log=log.info)
    pipeline.save_model(out / DENOISER_CKPT, result.model)
    _save_training(out, "denoiser", result)
    return EXIT_OK


def cmd_retrain(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    classifier = _load(out / CLASSIFIER_CKPT, ResidualClassifier)
    denoiser = _load(out / DENOISER_CKPT, Denoiser)
    result = pipeline.retrain_classifier(_data(cfg, "train"), denoiser, classifier,
                                         _train_config(cfg, "retrain"), log=log.info)
    pipeline.save_model(out / RETRAINED_CKPT, result.model)
    _save_training(out, "retrain", result)
    return EXIT_OK


def cmd_attack_eval(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    classifier = _load(out / CLASSIFIER_CKPT, ResidualClassifier)
    denoiser = _optional(out / DENOISER_CKPT, Denoiser)
    retrained = _optional(out / RETRAINED_CKPT, ResidualClassifier)
    specs = attack_specs(cfg, cfg.attacks, cfg.epsilons[1])
    report = pipeline.evaluate(_data(cfg, "test"), classifier, specs, denoiser, retrained,
                               seed=cfg.seed, log=log.info)
    report.seeds["run"] = cfg.seed
    report.write(out / "report.csv")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    classifier = _load(out / CLASSIFIER_CKPT, ResidualClassifier)
    denoiser = _load(out / DENOISER_CKPT, Denoiser)
    retrained = _load(out / RETRAINED_CKPT, ResidualClassifier)
    train, test = _data(cfg, "train"), _data(cfg, "test")
    arms_dir = out / "ablation"
    arms_dir.mkdir(exist_ok=True)
    head_models = {}
    for heads in cfg.ablation_heads:
        if heads == denoiser.config.heads:
            head_models[heads] = denoiser
            continue
        path = arms_dir / f"denoiser_heads{heads}.tdcp"
        if path.is_file():
            head_models[heads] = pipeline.load_model(path, Denoiser)
            continue
        log.info("training heads=%d arm", heads)
        result = pipeline.train_denoiser(train, classifier, _train_config(cfg, "denoiser"),
                                         _denoiser_config(cfg, train.channels, heads), log=log.info)
        pipeline.save_model(path, result.model)
        _save_training(arms_dir, f"denoiser_heads{heads}", result)
        head_models[heads] = result.model
    text = pipeline.ablation_suite(test, classifier, attack_specs(cfg, cfg.attacks, cfg.epsilons[1]),
                                   denoiser, retrained, head_models, seed=cfg.seed, log=log.info)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze_subbands(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    classifier = _load(out / CLASSIFIER_CKPT, ResidualClassifier)
    eps = cfg.epsilons[1]
    stats = pipeline.analyze_subbands(_data(cfg, "test"), classifier, attack_specs(cfg, cfg.attacks, eps))
    cols = ("images", "ll_fraction", "lh_fraction", "hl_fraction", "hh_fraction", "detail_fraction")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("attack", "epsilon") + cols)
    for family, s in stats.items():
        w.writerow([family, f"{s['epsilon']:g}", s["images"]] + [f"{s[c]:.6f}" for c in cols[1:]])
    (out / "subbands.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_dump_defaults(cfg: RunConfig) -> int:
    sys.stdout.write(dumps(cfg))
    return EXIT_OK


HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "train-denoiser": cmd_train_denoiser,
    "retrain": cmd_retrain,
    "attack-eval": cmd_attack_eval,
    "ablate": cmd_ablate,
    "analyze-subbands": cmd_analyze_subbands,
    "dump-defaults": cmd_dump_defaults,
}


def _fail(kind: str, code: int, err: BaseException | str) -> int:
    message = str(err).replace("\n", " ").strip() or type(err).__name__
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        command = "dump-defaults" if args.dump_defaults else args.command
        if command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        if not logging.getLogger().handlers and not log.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter("%(asctime)s %(message)s", "%H:%M:%S"))
            log.addHandler(handler)
        log.setLevel(logging.WARNING if getattr(args, "quiet", False) else logging.INFO)
        cfg = resolve_config(args)
        # bad attack settings are config errors, reported before any file is touched
        attack_specs(cfg, cfg.attack_mix, cfg.epsilons[0])
        attack_specs(cfg, cfg.attacks, cfg.epsilons[1])
        return HANDLERS[command](cfg)
    except UsageError as err:
        return _fail("usage", EXIT_USAGE, err)
    except ConfigError as err:
        return _fail("config", EXIT_CONFIG, err)
    except FileNotFoundError as err:
        return _fail("missing_file", EXIT_MISSING_FILE, err)
    except (DatasetFormatError, CheckpointError) as err:
        return _fail("bad_data", EXIT_BAD_DATA, err)
    except (NonFiniteError, pipeline.FrozenIntegrityError) as err:
        return _fail("numeric", EXIT_NUMERIC, err)
    except Exception as err:  # noqa: BLE001 - last-resort single-line report
        return _fail("failure", EXIT_FAILURE, f"{type(err).__name__}: {err}")


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

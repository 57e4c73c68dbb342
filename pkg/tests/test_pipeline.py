import csv
import io
import math

import numpy as np
import pytest

from advlab import pipeline as P
from advlab.attacks import AttackSpec, FAMILIES
from advlab.classifier import ClassifierConfig, ResidualClassifier, accuracy
from advlab.denoiser import Denoiser, DenoiserConfig, NonFiniteError
from advlab.gradcheck import max_gradient_error
from advlab.io.checkpoint import CheckpointError
from advlab.io.datasets import DatasetHandle, synthetic_dataset
from advlab.losses import LabelError, charbonnier_loss, cross_entropy_loss
from advlab.optim import Adam, AdamState, adam_step, cosine_lr
from advlab.tensor import Tensor, backward


def T(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- losses --------------------------------------------------------------------------


def test_charbonnier_at_zero_difference(rng):
    x = rng.random((2, 3))
    assert charbonnier_loss(Tensor(x), Tensor(x), 1e-3).item() == 1e-3


def test_charbonnier_l1_limit():
    loss = charbonnier_loss(Tensor(np.array([3.0, -4.0])), Tensor(np.zeros(2)), 1e-3).item()
    assert 3.5 < loss < 3.5 + 1e-3


def test_charbonnier_gradient(rng):
    x, y = T(rng.normal(size=(3, 4))), T(rng.normal(size=(3, 4)))
    assert max_gradient_error(lambda: charbonnier_loss(x, y), [x, y], h=1e-6) < 1e-8


def test_charbonnier_errors():
    with pytest.raises(ValueError):
        charbonnier_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        charbonnier_loss(Tensor(np.zeros(2)), Tensor(np.zeros(2)), eps=0)


def test_cross_entropy_values(rng):
    assert cross_entropy_loss(Tensor(np.zeros((4, 10))), np.arange(4)).item() == pytest.approx(math.log(10), rel=1e-15)
    logits = np.full((2, 10), -500.0)
    logits[[0, 1], [3, 7]] = 500.0
    assert cross_entropy_loss(Tensor(logits), np.array([3, 7])).item() < 1e-300


def test_cross_entropy_gradient_and_labels(rng):
    z = T(rng.normal(size=(5, 10)))
    y = rng.integers(0, 10, 5)
    assert max_gradient_error(lambda: cross_entropy_loss(z, y), [z]) < 1e-6
    for bad in (np.array([0, 1, 2, 3, 10]), np.array([0, 1, 2, 3, -1]), np.array([0.0, 1, 2, 3, 4])):
        with pytest.raises(LabelError):
            cross_entropy_loss(z, bad)


# -- optimizer -----------------------------------------------------------------------


def test_adam_first_step_closed_form(rng):
    w = T(rng.normal(size=5))
    w0 = w.data.copy()
    g = rng.normal(size=5)
    w.grad = g.copy()
    state = AdamState.for_params([w])
    adam_step([w], state, 0.01)
    np.testing.assert_allclose(w0 - w.data, 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_fixed_point(rng):
    w = T(rng.normal(size=3))
    w0 = w.data.copy()
    w.grad = np.zeros(3)
    state = AdamState.for_params([w])
    adam_step([w], state, 0.1)
    assert np.array_equal(w.data, w0)
    state.m[0][:] = 1.0
    state.v[0][:] = 1.0
    w.grad = np.zeros(3)
    adam_step([w], state, 0.0)
    np.testing.assert_allclose(state.m[0], 0.9)
    np.testing.assert_allclose(state.v[0], 0.999)


def test_adam_shape_mismatch():
    w = T(np.zeros(3))
    with pytest.raises(ValueError):
        adam_step([w], AdamState([np.zeros(2)], [np.zeros(2)]), 0.1)


def test_adam_converges_on_quadratic(rng):
    target = rng.normal(size=6)
    w = T(np.zeros(6))
    opt = Adam([w])
    for step in range(500):
        opt.zero_grad()
        backward(((w - Tensor(target)) ** 2).sum())
        opt.step(cosine_lr(step, 500, 0.1, 1e-4))
    assert np.abs(w.data - target).max() < 1e-3


def test_cosine_schedule_endpoints_and_monotone():
    lrs = [cosine_lr(e, 7, 0.004, 0.0005) for e in range(7)]
    assert lrs[0] == 0.004 and lrs[-1] == 0.0005
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(0, 1, 0.004, 0.0005) == 0.004


def test_train_config_validation():
    with pytest.raises(ValueError):
        P.TrainConfig("denoiser", 1, 4)
    with pytest.raises(ValueError):
        P.TrainConfig("classifier", 1, 4, lr_start=1e-4, lr_end=1e-3)
    with pytest.raises(ValueError):
        P.TrainConfig("finetune", 1, 4)
    cfg = P.TrainConfig("classifier", 3, 4)
    assert (cfg.lr(0), cfg.lr(2)) == (0.004, 0.0005)


# -- training phases on tiny data ----------------------------------------------------


@pytest.fixture(scope="module")
def tiny():
    train = synthetic_dataset(10, 400, size=16)
    test = synthetic_dataset(11, 100, size=16, split="test")
    cfg = P.TrainConfig("classifier", 8, 32, seed=0)
    clf = P.train_classifier(train, cfg, ClassifierConfig(widths=(8, 8, 16))).model
    return train, test, clf


def small_denoiser_cfg(heads=2):
    return DenoiserConfig(embed_dim=4, heads=heads, scales=2)


def test_tiny_classifier_learns(tiny):
    _, test, clf = tiny
    assert accuracy(clf, test.images, test.labels) > 80.0


def test_denoiser_identity_start_and_frozen_classifier(tiny):
    train, _, clf = tiny
    data = train.take(32)
    before = clf.checksum()
    cfg = P.TrainConfig("denoiser", 1, 32, attack_mix=[AttackSpec("fgsm", 0.3)])
    result = P.train_denoiser(data, clf, cfg, small_denoiser_cfg())
    assert clf.checksum() == before == result.frozen_checksum
    adv = P.run_attack(AttackSpec("fgsm", 0.3), data.images, data.labels, clf, batch_size=32)
    expected = np.sqrt((adv - data.images) ** 2 + 1e-6).mean()
    assert abs(result.step_losses[0] - expected) < 1e-9


def test_denoiser_with_zero_budget_stays_near_floor(tiny):
    train, _, clf = tiny
    cfg = P.TrainConfig("denoiser", 2, 16, attack_mix=[AttackSpec("pgd", 0.0)])
    result = P.train_denoiser(train.take(32), clf, cfg, small_denoiser_cfg())
    assert max(result.step_losses) <= 2 * cfg.charbonnier_eps


def test_denoiser_loss_decreases(tiny):
    train, _, clf = tiny
    cfg = P.TrainConfig("denoiser", 3, 16, attack_mix=[AttackSpec(f, 0.3, steps=3) for f in FAMILIES])
    result = P.train_denoiser(train.take(96), clf, cfg, DenoiserConfig(embed_dim=8, heads=2, scales=2))
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    assert result.lrs[0] == 0.004 and result.lrs[-1] == 0.0005
    assert result.loss_csv().splitlines()[0] == "epoch,lr,mean_loss"


def test_retrain_control_run_keeps_clean_accuracy(tiny):
    train, test, clf = tiny
    identity = Denoiser(small_denoiser_cfg())
    before = identity.checksum()
    cfg = P.TrainConfig("retrain", 1, 32, 5e-4, 1e-4, attack_mix=[AttackSpec("fgsm", 0.0)])
    result = P.retrain_classifier(train, identity, clf, cfg)
    assert identity.checksum() == before
    assert accuracy(result.model, test.images, test.labels) >= accuracy(clf, test.images, test.labels) - 1.0


def test_retrain_is_deterministic_and_leaves_input_untouched(tiny, tmp_path):
    train, _, clf = tiny
    den = Denoiser(small_denoiser_cfg(), zero_output=False)
    ref = clf.checksum()
    cfg = P.TrainConfig("retrain", 1, 16, 5e-4, 1e-4, seed=4,
                        attack_mix=[AttackSpec("pgd", 0.2, steps=2), AttackSpec("fgsm", 0.2)])
    paths = []
    for i in range(2):
        model = P.retrain_classifier(train.take(48), den, clf, cfg).model
        paths.append(tmp_path / f"r{i}.tdcp")
        P.save_model(paths[-1], model)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert clf.checksum() == ref


def test_non_finite_loss_aborts(tiny):
    train, _, _ = tiny
    images = train.images[:8].copy()
    images[0, 0, 0, 0] = np.nan
    bad = DatasetHandle("synthetic", "train", images, train.labels[:8])
    with pytest.raises(NonFiniteError, match="epoch 0 step 0"):
        P.train_classifier(bad, P.TrainConfig("classifier", 1, 8), ClassifierConfig(widths=(4, 4, 4)))


def test_frozen_violation_detected(tiny):
    _, _, clf = tiny
    m = P.clone_model(clf)
    before = m.checksum()
    m.head.bias.data = m.head.bias.data + 1.0
    with pytest.raises(P.FrozenIntegrityError):
        P._verify_frozen(m, before, "classifier")


# -- evaluation and ablation ---------------------------------------------------------


def test_evaluate_zero_budget_and_structure(tiny):
    _, test, clf = tiny
    specs = [AttackSpec("fgsm", 0.0), AttackSpec("pgd", 0.0, steps=2)]
    report = P.evaluate(test.take(40), clf, specs)
    assert len(report.rows) == 2
    for row in report.rows:
        assert row.attacked_accuracy == row.clean_accuracy
        assert row.defended_accuracy is None
    lines = report.to_csv().splitlines()
    assert lines[0] == ",".join(P.CSV_HEADER)
    assert len(lines) == 3
    assert lines[1].endswith(",,")


def test_evaluate_full_report(tiny, tmp_path):
    _, test, clf = tiny
    data = test.take(40)
    den = Denoiser(small_denoiser_cfg())
    specs = [AttackSpec(f, 0.3, steps=2) for f in FAMILIES]
    report = P.evaluate(data, clf, specs, den, clf)
    for row in report.rows:
        for v in (row.clean_accuracy, row.attacked_accuracy, row.defended_accuracy, row.defended_retrained_accuracy):
            assert 0.0 <= v <= 100.0
        # identity denoiser: defended == attacked
        assert row.defended_accuracy == row.attacked_accuracy
    fgsm = report.subbands["fgsm"]
    assert fgsm["ll_fraction"] + fgsm["lh_fraction"] + fgsm["hl_fraction"] + fgsm["hh_fraction"] == pytest.approx(1.0)
    report.write(tmp_path / "r.csv")
    rows = list(csv.DictReader(io.StringIO((tmp_path / "r.csv").read_text())))
    assert [r["attack"] for r in rows] == list(FAMILIES)
    assert all(len(r["clean_acc"].split(".")[1]) == 2 for r in rows)
    assert (tmp_path / "r.json").is_file()


def test_ablation_csv_shape(tiny):
    _, test, clf = tiny
    data = test.take(20)
    specs = [AttackSpec("fgsm", 0.3), AttackSpec("bim", 0.3, steps=2)]
    heads = {1: Denoiser(small_denoiser_cfg(1)), 4: Denoiser(small_denoiser_cfg(4))}
    text = P.ablation_suite(data, clf, specs, heads[4], clf, heads)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0].keys()) == list(P.ABLATION_HEADER)
    for name, arms in (("retrain", {"no-retrain", "full"}), ("heads", {"heads=1", "heads=4"})):
        sub = [r for r in rows if r["ablation"] == name]
        assert len(sub) == 2 * len(specs)
        assert {r["arm"] for r in sub} == arms
    assert all(r["defended_retrained_acc"] == "" for r in rows if r["arm"] == "no-retrain")


def test_model_roundtrip(tiny, tmp_path):
    _, test, clf = tiny
    P.save_model(tmp_path / "c.tdcp", clf)
    back = P.load_model(tmp_path / "c.tdcp", ResidualClassifier)
    assert back.checksum() == clf.checksum() and back.config == clf.config
    den = Denoiser(DenoiserConfig(embed_dim=8, heads=4, seed=9), zero_output=False)
    P.save_model(tmp_path / "d.tdcp", den)
    assert P.load_model(tmp_path / "d.tdcp").checksum() == den.checksum()
    with pytest.raises(CheckpointError):
        P.load_model(tmp_path / "d.tdcp", ResidualClassifier)
    with pytest.raises(FileNotFoundError):
        P.load_model(tmp_path / "missing.tdcp")

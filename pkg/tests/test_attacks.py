import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.attacks import AttackSpec, bim, fgsm, frozen, input_gradient, mifgsm, pgd, run_attack
from advlab.classifier import ClassifierConfig, ResidualClassifier, accuracy, classify
from advlab.functional import GeometryError
from advlab.gradcheck import max_gradient_error
from advlab.losses import cross_entropy_loss
from advlab.nn import Linear, Module
from advlab.tensor import Tensor


@pytest.fixture(scope="module")
def small_model():
    return ResidualClassifier(ClassifierConfig(widths=(4, 4, 8), seed=2))


@pytest.fixture
def batch(rng):
    return rng.random((6, 1, 8, 8)), rng.integers(0, 10, 6)


class Toy(Module):
    """Linear classifier on flattened 8x8 images."""

    def __init__(self, rng):
        self.fc = Linear(64, 10, rng)

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.fc(x.reshape(x.shape[0], 64))


def test_spec_normalization():
    f = AttackSpec("FGSM", 0.3, steps=7, step_size=0.01, decay=0.5, random_start=True)
    assert (f.family, f.steps, f.step_size, f.random_start, f.decay) == ("fgsm", 1, 0.3, False, 0.0)
    assert AttackSpec("pgd", 0.3).random_start is True
    assert AttackSpec("pgd", 0.3).step_size == pytest.approx(0.075)
    assert AttackSpec("bim", 0.3, random_start=True).random_start is False
    assert AttackSpec("mi-fgsm", 0.3).decay == 1.0
    for bad in (dict(family="cw", epsilon=0.1), dict(family="pgd", epsilon=-1),
                dict(family="pgd", epsilon=0.1, steps=0), dict(family="pgd", epsilon=0.1, step_size=0.2)):
        with pytest.raises(ValueError):
            AttackSpec(**bad)


def test_classifier_shape_and_batch_independence(small_model, batch):
    x, _ = batch
    logits = classify(x, small_model).data
    assert logits.shape == (6, 10)
    perm = np.random.default_rng(0).permutation(6)
    np.testing.assert_allclose(classify(x[perm], small_model).data, logits[perm], atol=1e-13)


def test_classifier_parameter_count():
    assert ResidualClassifier().num_parameters() == 77418


def test_classifier_stage_resolutions():
    model = ResidualClassifier(ClassifierConfig(widths=(4, 4, 8)))
    h = Tensor(np.zeros((1, 1, 28, 28)))
    h = model.stem(h)
    sizes = []
    for stage in model.stages:
        h = stage(h)
        sizes.append(h.shape[-2:])
    assert sizes == [(28, 28), (14, 14), (7, 7)]


def test_classifier_rejects_odd_stage_extent():
    with pytest.raises(GeometryError):
        ResidualClassifier(ClassifierConfig(widths=(4, 4, 8)))(np.zeros((1, 1, 14, 14)))


def test_classifier_input_gradient(small_model, batch):
    x, y = batch
    xt = Tensor(x, requires_grad=True)
    assert max_gradient_error(lambda: cross_entropy_loss(small_model(xt), y), [xt]) < 1e-4


def test_zero_budget_is_identity(small_model, batch):
    x, y = batch
    for fam in ("fgsm", "pgd", "bim", "mifgsm"):
        assert np.array_equal(run_attack(AttackSpec(fam, 0.0), x, y, small_model), x)


def test_fgsm_moves_every_free_pixel_by_eps(rng):
    model = Toy(rng)
    x = 0.25 + 0.5 * rng.random((4, 1, 8, 8))
    y = rng.integers(0, 10, 4)
    adv = fgsm(x, y, model, AttackSpec("fgsm", 0.1))
    g = input_gradient(model, x, y)
    moved = g != 0
    np.testing.assert_allclose(np.abs(adv - x)[moved], 0.1, rtol=0, atol=1e-15)
    assert np.array_equal(np.sign(adv - x), np.sign(g))


def test_fgsm_sign_matches_finite_difference_oracle(rng):
    model = Toy(rng)
    x = 0.25 + 0.5 * rng.random((1, 1, 8, 8))
    y = np.array([3])
    xt = Tensor(x.copy(), requires_grad=True)
    from advlab.gradcheck import numeric_grad
    num = numeric_grad(lambda: cross_entropy_loss(model(xt), y, "sum"), xt, 1e-6)
    adv = fgsm(x, y, model, AttackSpec("fgsm", 0.05))
    assert np.array_equal(np.sign(adv - x), np.sign(num))


def test_reduction_lattice(small_model, batch):
    x, y = batch
    eps = 0.2
    base = fgsm(x, y, small_model, AttackSpec("fgsm", eps))
    one = pgd(x, y, small_model, AttackSpec("pgd", eps, steps=1, step_size=eps, random_start=False))
    assert np.array_equal(base, one)
    spec = AttackSpec("pgd", eps, steps=5, step_size=0.05, random_start=False)
    b = bim(x, y, small_model, replace(spec, family="bim"))
    assert np.array_equal(b, pgd(x, y, small_model, spec))
    m = mifgsm(x, y, small_model, AttackSpec("mifgsm", eps, steps=5, step_size=0.05, decay=0.0))
    assert np.array_equal(m, b)
    assert np.array_equal(bim(x, y, small_model, AttackSpec("bim", eps, steps=1, step_size=eps)), base)
    m1 = mifgsm(x, y, small_model, AttackSpec("mifgsm", eps, steps=1, step_size=0.05, decay=1.0))
    b1 = bim(x, y, small_model, AttackSpec("bim", eps, steps=1, step_size=0.05))
    assert np.array_equal(m1, b1)


def test_pgd_random_start_is_seeded(small_model, batch):
    x, y = batch
    spec = AttackSpec("pgd", 0.2, steps=2, seed=5)
    assert np.array_equal(run_attack(spec, x, y, small_model), run_attack(spec, x, y, small_model))
    assert not np.array_equal(run_attack(spec, x, y, small_model),
                              run_attack(spec.with_seed(6), x, y, small_model))


def test_attacks_do_not_touch_parameters(small_model, batch):
    x, y = batch
    for p in small_model.parameters():
        p.grad = None  # earlier gradchecks on this fixture leave grads behind
    before = small_model.checksum()
    flags = [p.requires_grad for p in small_model.parameters()]
    for fam in ("fgsm", "pgd", "bim", "mifgsm"):
        run_attack(AttackSpec(fam, 0.2, steps=2), x, y, small_model)
    assert small_model.checksum() == before
    assert [p.requires_grad for p in small_model.parameters()] == flags
    assert all(p.grad is None for p in small_model.parameters())


def test_frozen_restores_flags_on_error(small_model):
    with pytest.raises(RuntimeError):
        with frozen(small_model):
            assert not any(p.requires_grad for p in small_model.parameters())
            raise RuntimeError
    assert all(p.requires_grad for p in small_model.parameters())


def test_mifgsm_zero_gradient_skips_normalization(rng):
    class Flat(Module):
        def __init__(self):
            self.b = Tensor(np.zeros(10), requires_grad=True)

        def forward(self, x):
            x = x if isinstance(x, Tensor) else Tensor(x)
            return x.reshape(x.shape[0], -1).sum(axis=1, keepdims=True) * 0.0 + self.b
    x = rng.random((2, 1, 4, 4))
    adv = mifgsm(x, np.array([1, 2]), Flat(), AttackSpec("mifgsm", 0.1))
    assert np.array_equal(adv, x)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["fgsm", "pgd", "bim", "mifgsm"]), st.floats(0.0, 0.5), st.integers(1, 4),
       st.floats(0.05, 1.0), st.floats(0.0, 2.0), st.integers(0, 2 ** 31 - 1))
def test_budget_and_range_invariants(fam, eps, steps, frac, decay, seed):
    model = ResidualClassifier(ClassifierConfig(widths=(4, 4, 4), seed=1))
    r = np.random.default_rng(seed)
    x = r.random((3, 1, 8, 8))
    y = r.integers(0, 10, 3)
    step = eps * frac if eps > 0 else None
    adv = run_attack(AttackSpec(fam, eps, steps=steps, step_size=step, decay=decay, seed=seed), x, y, model)
    assert np.abs(adv - x).max() <= eps + 1e-12
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_ball_and_range_over_100_images(small_model, rng):
    x = rng.random((100, 1, 8, 8))
    y = rng.integers(0, 10, 100)
    adv = run_attack(AttackSpec("mifgsm", 0.3, steps=3), x, y, small_model)
    assert np.abs(adv - x).max() <= 0.3 + 1e-12
    assert 0.0 <= adv.min() and adv.max() <= 1.0


def test_chunking_does_not_change_deterministic_attacks(small_model, batch):
    x, y = batch
    spec = AttackSpec("bim", 0.1, steps=3)
    assert np.array_equal(run_attack(spec, x, y, small_model, batch_size=2),
                          run_attack(spec, x, y, small_model, batch_size=6))


def test_accuracy_percent(small_model, batch):
    x, _ = batch
    pred = classify(x, small_model).data.argmax(axis=1)
    assert accuracy(small_model, x, pred) == 100.0

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustvit import autograd as ag
from robustvit.adversarial import (AdvConfig, fgsm_ll, fgsm_rs, generate, input_gradient, least_likely_class,
                                   pgd, project_linf)
from robustvit.autograd import Tensor

EPS = 8 / 255


def linear_model(w):
    wt = Tensor(w, dtype=np.float32)

    def model(x):
        return ag.reshape(x, (x.shape[0], int(np.prod(x.shape[1:])))) @ wt
    return model


def zero_model(x):
    return ag.scale(ag.reshape(x, (x.shape[0], int(np.prod(x.shape[1:])))), 0.0) @ Tensor(np.ones((12, 2)))


def ce(model, x, y):
    with ag.no_grad():
        return float(ag.cross_entropy_logits(model(Tensor(x)), y, reduction="sum").data)


@pytest.fixture
def setup(rng):
    w = rng.normal(size=(12, 2)).astype(np.float32)
    x = np.full((3, 2, 2, 3), 0.5, dtype=np.float32)
    return linear_model(w), w, x


def test_least_likely_examples():
    np.testing.assert_array_equal(least_likely_class(np.array([[2.0, -1.0, 0.5], [0.0, 0.0, -3.0]])), [1, 2])
    assert least_likely_class(np.array([[1.0, 1.0]]))[0] == 0


def test_least_likely_needs_two_classes():
    with pytest.raises(ValueError):
        least_likely_class(np.zeros((2, 1)))


def test_project_linf_examples():
    np.testing.assert_array_equal(project_linf(np.array([0.5, -0.5, 0.01]), 0.1), [0.1, -0.1, 0.01])


@given(st.floats(0, 0.99), st.integers(0, 2**31 - 1))
def test_project_linf_is_within_budget_and_idempotent(eps, seed):
    d = np.random.default_rng(seed).normal(size=20).astype(np.float32)
    out = project_linf(d, eps)
    assert np.abs(out).max() <= eps
    np.testing.assert_array_equal(project_linf(out, eps), out)


def test_zero_gradient_fgsm_keeps_random_start():
    x = np.full((2, 2, 2, 3), 0.5, dtype=np.float32)
    adv = fgsm_rs(zero_model, x, np.zeros(2, int), AdvConfig(EPS), np.random.default_rng(0))
    start = np.random.default_rng(0).uniform(-EPS, EPS, size=x.shape).astype(np.float32)
    np.testing.assert_allclose(adv.delta, start, atol=1e-7)


def test_fgsm_without_start_follows_gradient_sign(setup):
    model, w, x = setup
    adv = fgsm_rs(model, x, np.zeros(3, int), AdvConfig(EPS, random_start=False))
    # d CE / d x for label 0 points along w1 - w0
    expected = np.float32(EPS) * np.sign(w[:, 1] - w[:, 0]).reshape(2, 2, 3)
    np.testing.assert_allclose(adv.delta, np.broadcast_to(expected, x.shape), atol=1e-7)


def test_fgsm_positive_gradient_gives_plus_eps():
    w = np.zeros((12, 2), np.float32)
    w[:, 1] = 1.0
    x = np.full((1, 2, 2, 3), 0.5, np.float32)
    adv = fgsm_rs(linear_model(w), x, np.zeros(1, int), AdvConfig(EPS, random_start=False))
    np.testing.assert_allclose(adv.x_adv - x, EPS, atol=1e-6)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["fgsm", "fgsm_ll", "pgd-3"]), st.floats(0.001, 0.3))
def test_attacks_respect_budget_and_pixel_range(seed, name, eps):
    rng = np.random.default_rng(seed)
    model = linear_model(rng.normal(size=(12, 2)).astype(np.float32))
    x = rng.random((4, 2, 2, 3)).astype(np.float32)
    adv = generate(name, model, x, rng.integers(0, 2, 4), eps, rng)
    assert adv.x_adv.dtype == np.float32
    assert np.abs(adv.x_adv.astype(np.float64) - x.astype(np.float64)).max() <= eps
    assert adv.x_adv.min() >= 0 and adv.x_adv.max() <= 1


def test_zero_budget_returns_input(setup):
    model, _, x = setup
    for name in ("fgsm", "fgsm_ll", "pgd-10"):
        np.testing.assert_array_equal(generate(name, model, x, np.zeros(3, int), 0.0, np.random.default_rng(0)).x_adv, x)


def test_unknown_attack(setup):
    model, _, x = setup
    for name in ("cw", "pgd-x"):
        with pytest.raises(ValueError):
            generate(name, model, x, np.zeros(3, int), EPS, np.random.default_rng(0))


def test_epsilon_validated():
    with pytest.raises(ValueError):
        AdvConfig(epsilon=1.5)


def test_pgd_alpha_default():
    assert AdvConfig(EPS, steps=10).alpha == pytest.approx(2.5 * EPS / 10)
    assert AdvConfig(EPS).alpha == EPS


def test_single_step_pgd_equals_fgsm(rng):
    model = linear_model(rng.normal(size=(12, 2)).astype(np.float32))
    x = rng.random((4, 2, 2, 3)).astype(np.float32)
    y = rng.integers(0, 2, 4)
    a = pgd(model, x, y, AdvConfig(EPS, steps=1, step_size=EPS, random_start=False))
    b = fgsm_rs(model, x, y, AdvConfig(EPS, random_start=False))
    np.testing.assert_array_equal(a.x_adv, b.x_adv)


def test_pgd_saturates_on_linear_model(setup):
    model, w, x = setup
    adv = pgd(model, x, np.zeros(3, int), AdvConfig(EPS, steps=10, random_start=False))
    expected = np.float32(EPS) * np.sign(w[:, 1] - w[:, 0]).reshape(2, 2, 3)
    np.testing.assert_allclose(adv.delta, np.broadcast_to(expected, x.shape), atol=1e-7)


def test_pgd_loss_does_not_decrease_with_steps(rng):
    model = linear_model(rng.normal(size=(12, 2)).astype(np.float32))
    x = rng.random((4, 2, 2, 3)).astype(np.float32)
    y = rng.integers(0, 2, 4)
    losses = [ce(model, pgd(model, x, y, AdvConfig(EPS, steps=k, step_size=EPS / 4, random_start=False)).x_adv, y)
              for k in range(1, 6)]
    assert all(b >= a - 1e-5 for a, b in zip(losses, losses[1:]))
    assert losses[0] >= ce(model, x, y)


def test_fgsm_ll_targets_least_likely_class(setup):
    model, w, x = setup
    with ag.no_grad():
        target = np.argmin(model(Tensor(x)).data, axis=1)
    adv = fgsm_ll(model, x, AdvConfig(EPS, random_start=False))
    np.testing.assert_array_equal(adv.target_label, target)
    g = input_gradient(model, x, target)
    np.testing.assert_allclose(adv.delta, np.float32(EPS) * np.sign(g), atol=1e-7)


def test_fgsm_ll_descent_moves_toward_target(setup):
    model, _, x = setup
    base = fgsm_ll(model, x, AdvConfig(EPS, random_start=False))
    desc = fgsm_ll(model, x, AdvConfig(EPS, random_start=False, descend_to_target=True))
    np.testing.assert_allclose(desc.delta, -base.delta, atol=1e-7)
    t = base.target_label
    assert ce(model, desc.x_adv, t) < ce(model, x, t) < ce(model, base.x_adv, t)


def test_random_start_needs_rng(setup):
    model, _, x = setup
    with pytest.raises(ValueError):
        fgsm_rs(model, x, np.zeros(3, int), AdvConfig(EPS))


def test_non_differentiable_model_rejected(setup):
    _, _, x = setup
    with pytest.raises(TypeError):
        input_gradient(lambda t: Tensor(np.zeros((3, 2))), x, np.zeros(3, int))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustvit import autograd as ag
from robustvit.autograd import Tensor
from robustvit.saliency import ViTProbe, guided_backprop
from robustvit.vit import ModelShape


def flat_linear(w):
    wt = Tensor(w, dtype=np.float32)
    return lambda x: ag.reshape(x, (x.shape[0], int(np.prod(x.shape[1:])))) @ wt


def test_constant_model_is_degenerate():
    model = flat_linear(np.zeros((16, 3), np.float32))
    out = guided_backprop(model, np.random.default_rng(0).random((2, 4, 4, 1)).astype(np.float32))
    np.testing.assert_array_equal(out.x_prime, 0.5)
    assert out.degenerate.all()


def test_linear_model_saliency_is_scaled_weight_column(rng):
    w = rng.normal(size=(16, 3)).astype(np.float32)
    x = rng.random((2, 4, 4, 1)).astype(np.float32)
    out = guided_backprop(flat_linear(w), x)
    top = np.argmax(x.reshape(2, -1) @ w, axis=1)
    for i in range(2):
        col = w[:, top[i]].astype(np.float64)
        expected = (col - col.min()) / (col.max() - col.min())
        np.testing.assert_allclose(out.x_prime[i].reshape(-1), expected, atol=1e-6)
    assert not out.degenerate.any()


def test_explicit_target_class(rng):
    w = rng.normal(size=(16, 3)).astype(np.float32)
    out = guided_backprop(flat_linear(w), rng.random((1, 4, 4, 1)).astype(np.float32), target=2)
    col = w[:, 2]
    np.testing.assert_allclose(out.x_prime[0].reshape(-1), (col - col.min()) / (col.max() - col.min()), atol=1e-6)


def test_single_image_input(rng):
    probe = ViTProbe(ModelShape(1, 8, 2, 16, 4), (8, 8, 1), 2, rng)
    out = guided_backprop(probe, rng.random((8, 8, 1)).astype(np.float32))
    assert out.x_prime.shape == (8, 8, 1)


def test_unknown_target_rule(rng):
    with pytest.raises(ValueError):
        guided_backprop(flat_linear(np.ones((16, 2), np.float32)), np.zeros((1, 4, 4, 1), np.float32), target="max")


def test_probe_is_frozen(rng):
    probe = ViTProbe(ModelShape(1, 8, 2, 16, 4), (8, 8, 1), 2, rng)
    assert not any(p.requires_grad for p in probe.parameters())


@given(st.integers(0, 2**31 - 1))
def test_probe_saliency_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    probe = ViTProbe(ModelShape(1, 8, 2, 16, 4), (8, 8, 1), 2, rng)
    out = guided_backprop(probe, rng.random((3, 8, 8, 1)).astype(np.float32))
    assert out.x_prime.dtype == np.float32 and out.x_prime.shape == (3, 8, 8, 1)
    assert out.x_prime.min() >= 0 and out.x_prime.max() <= 1
    nondeg = ~out.degenerate
    assert np.all(out.x_prime[nondeg].reshape(nondeg.sum(), -1).max(axis=1) == 1)

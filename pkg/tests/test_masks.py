"""Mask union, latent downsampling, and the weighted denoising loss."""

import numpy as np
import pytest

from relvid.errors import ConfigError, ShapeError
from relvid.masks import MaskSet, masked_loss, relation_mask, to_latent
from relvid.model import diffusion_loss
from relvid.tensor import Tensor


def _mask(shape, rng):
    return (rng.random(shape) > 0.5).astype(np.float64)


def test_relation_mask_is_lattice_join():
    rng = np.random.default_rng(0)
    a = rng.random((2, 4, 4))
    b = rng.random((2, 4, 4))
    u = relation_mask(a, b)
    np.testing.assert_array_equal(u, relation_mask(b, a))       # commutative
    np.testing.assert_array_equal(relation_mask(a, a), a)       # idempotent
    np.testing.assert_array_equal(relation_mask(a, np.zeros_like(a)), a)
    assert (u >= a).all() and (u >= b).all()
    # binary masks: union equals logical-or
    ba, bb = _mask((2, 4, 4), rng), _mask((2, 4, 4), rng)
    np.testing.assert_array_equal(relation_mask(ba, bb),
                                  np.maximum(ba, bb))


def test_relation_mask_validation():
    with pytest.raises(ShapeError):
        relation_mask(np.zeros((2, 4, 4)), np.zeros((2, 4, 8)))
    with pytest.raises(ShapeError):
        relation_mask(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ConfigError):
        relation_mask(np.full((2, 4, 4), 1.5), np.zeros((2, 4, 4)))
    with pytest.raises(ConfigError):
        relation_mask(np.full((2, 4, 4), -0.1), np.zeros((2, 4, 4)))


def test_to_latent_hand_example():
    # one 2x2x2 block fully covered, one half covered, two empty
    m = np.zeros((2, 4, 4))
    m[:, :2, :2] = 1.0
    m[0, :2, 2:] = 1.0
    lat = to_latent(m, t_c=2, p=2)
    assert lat.shape == (1, 2, 2)
    np.testing.assert_allclose(lat, [[[1.0, 0.5], [0.0, 0.0]]])


def test_to_latent_preserves_mean():
    rng = np.random.default_rng(1)
    m = rng.random((4, 8, 8))
    lat = to_latent(m, t_c=2, p=4)
    assert lat.shape == (2, 2, 2)
    assert lat.mean() == pytest.approx(m.mean(), rel=1e-12)
    assert lat.min() >= 0.0 and lat.max() <= 1.0


def test_to_latent_identity_when_unit_blocks():
    rng = np.random.default_rng(2)
    m = rng.random((2, 3, 5))
    np.testing.assert_array_equal(to_latent(m, 1, 1), m)


def test_to_latent_divisibility_errors():
    with pytest.raises(ShapeError):
        to_latent(np.zeros((3, 4, 4)), t_c=2, p=2)
    with pytest.raises(ShapeError):
        to_latent(np.zeros((2, 5, 4)), t_c=2, p=2)


def test_mask_set_builds_union():
    rng = np.random.default_rng(3)
    a, b = _mask((2, 4, 4), rng), _mask((2, 4, 4), rng)
    ms = MaskSet(m_s1=a, m_s2=b)
    np.testing.assert_array_equal(ms.m_r, np.maximum(a, b))
    np.testing.assert_array_equal(ms.pixel("subject1"), a)
    np.testing.assert_array_equal(ms.pixel("relation"), ms.m_r)
    np.testing.assert_array_equal(ms.latent("subject2", 2, 2),
                                  to_latent(b, 2, 2))
    with pytest.raises(ConfigError):
        ms.pixel("background")


def test_masked_loss_lambda_zero_is_plain_mse():
    rng = np.random.default_rng(4)
    eps = rng.standard_normal((2, 3, 3, 4))
    eps_hat = rng.standard_normal((2, 3, 3, 4))
    m = rng.random((2, 3, 3))
    lw = masked_loss(eps, eps_hat, m, 0.0).item()
    assert lw == diffusion_loss(eps, eps_hat).item()


def test_masked_loss_all_ones_scales_by_lambda_plus_one():
    rng = np.random.default_rng(5)
    eps = rng.standard_normal((2, 3, 3, 4))
    eps_hat = rng.standard_normal((2, 3, 3, 4))
    ones = np.ones((2, 3, 3))
    base = diffusion_loss(eps, eps_hat).item()
    assert masked_loss(eps, eps_hat, ones, 50.0).item() == \
        pytest.approx(51.0 * base, rel=1e-12)


def test_masked_loss_inside_outside_ratio():
    # the same localized error costs (lam + 1) times more inside the mask
    lam = 50.0
    m = np.zeros((2, 4, 4))
    m[0, 1, 2] = 1.0
    eps = np.zeros((2, 4, 4, 3))
    inside = eps.copy()
    inside[0, 1, 2, :] = 0.7
    outside = eps.copy()
    outside[1, 3, 0, :] = 0.7
    l_in = masked_loss(eps, inside, m, lam).item()
    l_out = masked_loss(eps, outside, m, lam).item()
    assert l_in == pytest.approx((lam + 1.0) * l_out, rel=1e-12)


def test_masked_loss_monotone_in_lambda():
    rng = np.random.default_rng(6)
    eps = rng.standard_normal((2, 4, 4, 2))
    eps_hat = rng.standard_normal((2, 4, 4, 2))
    m = _mask((2, 4, 4), rng)
    vals = [masked_loss(eps, eps_hat, m, lam).item()
            for lam in (0.0, 1.0, 10.0, 50.0)]
    assert vals == sorted(vals) and vals[0] < vals[-1]


def test_masked_loss_hand_value():
    eps = np.zeros((1, 1, 1, 2))
    eps_hat = np.full((1, 1, 1, 2), 2.0)
    m = np.ones((1, 1, 1))
    # mean((50*1 + 1) * 4) over two elements = 204
    assert masked_loss(eps, eps_hat, m, 50.0).item() == 204.0


def test_masked_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    eps = rng.standard_normal((1, 2, 2, 3))
    x = Tensor(rng.standard_normal((1, 2, 2, 3)), requires_grad=True)
    m = rng.random((1, 2, 2))
    masked_loss(eps, x, m, 50.0).backward()
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 1, 2), (0, 0, 1, 1)]:
        keep = x.data[idx]
        x.data[idx] = keep + h
        up = masked_loss(eps, Tensor(x.data), m, 50.0).item()
        x.data[idx] = keep - h
        dn = masked_loss(eps, Tensor(x.data), m, 50.0).item()
        x.data[idx] = keep
        fd = (up - dn) / (2 * h)
        assert x.grad[idx] == pytest.approx(fd, rel=1e-5)


def test_masked_loss_validation():
    eps = np.zeros((2, 2, 2, 1))
    m = np.zeros((2, 2, 2))
    with pytest.raises(ConfigError):
        masked_loss(eps, eps, m, -1.0)
    with pytest.raises(ShapeError):
        masked_loss(eps, np.zeros((2, 2, 2, 2)), m, 1.0)
    with pytest.raises(ShapeError):
        masked_loss(eps, eps, np.zeros((2, 2)), 1.0)
    with pytest.raises(ConfigError):
        masked_loss(eps, eps, np.full((2, 2, 2), 2.0), 1.0)

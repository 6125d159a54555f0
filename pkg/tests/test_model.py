"""Patchify geometry, noise schedule, and denoiser forward contracts."""

import numpy as np
import pytest

from relvid import tensor as tz
from relvid.errors import ConfigError, ShapeError, VocabError
from relvid.lora import init_triplet
from relvid.model import (Denoiser, ModelConfig, NoiseSchedule,
                          diffusion_loss, patchify, sinusoid_embedding,
                          unpatchify)

TINY = ModelConfig(layers=1, d_model=8, heads=2, text_len=2, frames=2,
                   height=8, width=8, t_c=2, patch=4, timesteps=10)


def _tiny_triplet(seed=0, randomize=True):
    tri = init_triplet(TINY.layers, TINY.d_model, TINY.d_ff, rank=2, seed=seed)
    if randomize:
        rng = np.random.default_rng(seed + 100)
        for _, p in tri.named_params():
            p.data = rng.standard_normal(p.data.shape) * 0.1
            p.requires_grad = True
    return tri


def test_patchify_roundtrip_exact():
    rng = np.random.default_rng(0)
    video = rng.standard_normal((8, 32, 32, 1))
    lat = patchify(video, 2, 4)
    assert lat.shape == (4, 8, 8, 32)
    np.testing.assert_array_equal(unpatchify(lat, 2, 4, 1), video)


def test_patchify_is_pure_rearrangement():
    rng = np.random.default_rng(1)
    video = rng.standard_normal((4, 8, 8, 3))
    lat = patchify(video, 2, 2)
    np.testing.assert_array_equal(np.sort(lat.ravel()),
                                  np.sort(video.ravel()))


def test_patchify_divisibility_errors():
    with pytest.raises(ShapeError):
        patchify(np.zeros((3, 8, 8, 1)), 2, 4)
    with pytest.raises(ShapeError):
        patchify(np.zeros((4, 9, 8, 1)), 2, 4)
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((2, 2, 2, 7)), 2, 4, 1)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(frames=7, t_c=2)
    with pytest.raises(ConfigError):
        ModelConfig(height=30)
    cfg = ModelConfig()
    assert cfg.latent_shape == (4, 8, 8, 32)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_linear_schedule_shape_and_range():
    sch = NoiseSchedule.linear(100)
    assert sch.timesteps == 100
    assert sch.betas[0] == pytest.approx(1e-4)
    assert sch.betas[-1] == pytest.approx(0.02)
    ab = sch.alpha_bars
    assert np.all(np.diff(ab) < 0) and ab[0] < 1.0 and ab[-1] > 0.0


def test_add_noise_formula():
    sch = NoiseSchedule.linear(10)
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((2, 3))
    eps = rng.standard_normal((2, 3))
    t = 4
    want = np.sqrt(sch.alpha_bars[t]) * z0 + np.sqrt(1 - sch.alpha_bars[t]) * eps
    np.testing.assert_array_equal(sch.add_noise(z0, t, eps), want)
    with pytest.raises(ConfigError):
        sch.add_noise(z0, 10, eps)
    with pytest.raises(ConfigError):
        sch.add_noise(z0, -1, eps)
    with pytest.raises(ShapeError):
        sch.add_noise(z0, 3, eps[:1])


def test_schedule_validation():
    with pytest.raises(ConfigError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ConfigError):
        NoiseSchedule(np.array([-0.1]))


def test_sinusoid_embedding_basics():
    emb = sinusoid_embedding([0, 1, 2], 8)
    assert emb.shape == (3, 8)
    np.testing.assert_allclose(emb[0, 0::2], 0.0, atol=1e-12)
    np.testing.assert_allclose(emb[0, 1::2], 1.0, atol=1e-12)


def test_init_determinism():
    a = Denoiser.init(TINY, seed=3)
    b = Denoiser.init(TINY, seed=3)
    for (n1, p1), (n2, p2) in zip(a.named_params(), b.named_params()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)


def test_forward_shape_and_determinism():
    den = Denoiser.init(TINY, seed=0)
    rng = np.random.default_rng(4)
    z = rng.standard_normal(TINY.latent_shape)
    with tz.no_grad():
        out1 = den.forward(z, [1, 5], 3).data
        out2 = den.forward(z, [1, 5], 3).data
    assert out1.shape == TINY.latent_shape
    np.testing.assert_array_equal(out1, out2)


def test_fresh_triplet_is_identity():
    den = Denoiser.init(TINY, seed=1)
    tri = _tiny_triplet(randomize=False)
    rng = np.random.default_rng(5)
    for _ in range(5):
        z = rng.standard_normal(TINY.latent_shape)
        with tz.no_grad():
            base = den.forward(z, [2, 6], 1).data
            with_tri = den.forward(z, [2, 6], 1, triplet=tri).data
        np.testing.assert_array_equal(base, with_tri)


def test_forward_rejects_bad_inputs():
    den = Denoiser.init(TINY, seed=0)
    z = np.zeros(TINY.latent_shape)
    with pytest.raises(ShapeError):
        den.forward(np.zeros((2, 2, 2, 32)), [1, 2], 0)
    with pytest.raises(VocabError):
        den.forward(z, [99], 0)
    with pytest.raises(VocabError):
        den.forward(z, [1, 2, 3], 0)   # longer than text_len
    with pytest.raises(ConfigError):
        den.forward(z, [1, 2], 99)


def test_attention_record_contents():
    den = Denoiser.init(TINY, seed=2)
    rng = np.random.default_rng(6)
    z = rng.standard_normal(TINY.latent_shape)
    with tz.no_grad():
        _, rec = den.forward(z, [1, 5], 2, record=True)
    heads, dh = TINY.heads, TINY.d_model // TINY.heads
    n_vis = TINY.n_vision
    assert len(rec.q) == TINY.layers
    assert rec.q[0].shape == (heads, n_vis, dh)
    assert rec.attn_text_rows[0].shape == (heads, TINY.text_len,
                                           TINY.text_len + n_vis)
    assert rec.attn_vis_to_text[0].shape == (heads, n_vis, TINY.text_len)
    # each attention row is a distribution
    for rows in rec.attn_text_rows:
        np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-9)
        assert (rows >= 0.0).all()


def test_forward_gradient_matches_finite_differences():
    den = Denoiser.init(TINY, seed=7)
    tri = _tiny_triplet(seed=7)
    rng = np.random.default_rng(8)
    z = rng.standard_normal(TINY.latent_shape)
    eps = rng.standard_normal(TINY.latent_shape)

    def build():
        return diffusion_loss(eps, den.forward(z, [1, 5], 2, triplet=tri))

    loss = build()
    loss.backward()
    params = dict(tri.named_params())
    picked = ["lora/relation/text/layer0/q/down",
              "lora/subject1/vision/layer0/v/up",
              "lora/ffn/vision/layer0/ffn_in/down"]
    h = 1e-6
    for name in picked:
        p = params[name]
        got = p.grad
        flat_idx = [0, p.data.size // 2, p.data.size - 1]
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            fp = build().item()
            p.data[idx] = old - h
            fm = build().item()
            p.data[idx] = old
            want = (fp - fm) / (2 * h)
            rel = abs(got[idx] - want) / max(abs(want), 1e-8)
            assert rel < 1e-3, f"{name}[{idx}]: {got[idx]} vs {want}"


def test_diffusion_loss_is_mse():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((2, 3, 3, 4))
    b = rng.standard_normal((2, 3, 3, 4))
    assert diffusion_loss(a, b).item() == pytest.approx(
        np.mean((a - b) ** 2), abs=1e-15
    )
    with pytest.raises(ShapeError):
        diffusion_loss(a, b[:1])

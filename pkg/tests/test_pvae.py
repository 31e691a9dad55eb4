import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phonemeldm.autodiff import Tensor, grad_check_params, precision
from phonemeldm.autodiff import tensor as T
from phonemeldm.config import VaeConfig
from phonemeldm.pvae import (
    DegenerateDurationError, Discriminator, PhonemeLatent, PhonemeVAE, adversarial_losses,
    kl_standard_normal, lsgan_d_loss, lsgan_g_loss, reparam_sample, round_durations, vae_loss,
    vae_step_loss,
)
from phonemeldm.synthdata import PhonemeSeq, gen_corpus

TINY = VaeConfig(d_model=8, heads=2, layers=1, d_z=4, disc_channels=4, disc_layers=2)


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(5, 2, 2, phoneme_len_range=(3, 5))


def _tiny64(seed=0, n_feat=11):
    with precision(np.float64):
        vae = PhonemeVAE(TINY, 64, n_feat, seed=seed)
        disc = Discriminator(n_feat, TINY.disc_channels, TINY.disc_layers, TINY.disc_kernel, seed=seed + 1)
    return vae, disc


def test_shapes(corpus):
    u = corpus.utterances[0]
    vae = PhonemeVAE(VaeConfig(), 64, 11, seed=0)
    lat = vae.encode(u.phonemes, u.features)
    P = len(u.phonemes)
    assert lat.mean.shape == (P, 8) and lat.logvar.shape == (P, 8)
    out = vae.decode(lat.mean, u.durations)
    assert out.frames.shape == (u.features.n_frames, 11)
    assert out.log_dur.shape == (P,) and out.f0.shape == (P,)
    assert out.features().n_frames == u.features.n_frames


def test_encoder_deterministic(corpus):
    u = corpus.utterances[1]
    a = PhonemeVAE(TINY, 64, 11, seed=3).encode(u.phonemes, u.features).mean.data
    b = PhonemeVAE(TINY, 64, 11, seed=3).encode(u.phonemes, u.features).mean.data
    assert a.tobytes() == b.tobytes()


def test_logvar_is_clipped(corpus):
    u = corpus.utterances[0]
    vae = PhonemeVAE(VaeConfig(logvar_clip=0.01), 64, 11, seed=0)
    lv = vae.encode(u.phonemes, u.features).logvar.data
    assert np.all(np.abs(lv) <= 0.01 + 1e-7)


def test_teacher_durations_set_frame_count():
    vae = PhonemeVAE(TINY, 64, 11, seed=0)
    out = vae.decode(Tensor(np.zeros((2, 4))), teacher_durations=[2, 3])
    assert out.frames.shape == (5, 11)
    assert list(out.durations) == [2, 3]
    with pytest.raises(ValueError):
        vae.decode(Tensor(np.zeros((2, 4))), teacher_durations=[2, 0])


def test_round_durations():
    assert list(round_durations(np.log([0.4, 2.6]))) == [1, 3]
    assert list(round_durations(np.log([1.5, 2.49]))) == [2, 2]
    with pytest.raises(DegenerateDurationError):
        round_durations(np.log([0.1, 0.3]))


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=10))
def test_rounded_durations_positive(log_dur):
    try:
        d = round_durations(log_dur)
    except DegenerateDurationError:
        assert np.all(np.floor(np.exp(log_dur) + 0.5) <= 0)
        return
    assert np.all(d >= 1)


def test_reparam_zero_noise_gives_mean():
    lat = PhonemeLatent(Tensor(np.arange(6.0).reshape(3, 2)), Tensor(np.zeros((3, 2))))
    np.testing.assert_array_equal(reparam_sample(lat, np.zeros((3, 2))).data, lat.mean.data)
    z = reparam_sample(lat, np.ones((3, 2)))
    np.testing.assert_allclose(z.data, lat.mean.data + 1.0)
    with pytest.raises(T.ShapeError):
        reparam_sample(lat, np.zeros((2, 2)))


def test_kl_values():
    lat = PhonemeLatent(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3))))
    assert kl_standard_normal(lat).item() == pytest.approx(0.5)
    std = PhonemeLatent(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert kl_standard_normal(std).item() == 0.0


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        lat = PhonemeLatent(Tensor(rng.normal(size=(3, 4))), Tensor(rng.uniform(-5, 5, size=(3, 4))))
        assert kl_standard_normal(lat).item() >= -1e-12


def test_lsgan_identities():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert lsgan_d_loss(ones, zeros).item() == 0.0
    assert lsgan_d_loss(zeros, ones).item() == 2.0
    assert lsgan_g_loss(ones).item() == 0.0
    assert lsgan_g_loss(zeros).item() == 1.0


def test_discriminator_loss_does_not_reach_generator(corpus):
    u = corpus.utterances[0]
    vae, disc = _tiny64()
    with precision(np.float64):
        out = vae.decode(vae.encode(u.phonemes, u.features).mean, u.durations)
        d_loss, _, _ = adversarial_losses(disc, u.features.stacked(), out.frames)
        vae.zero_grad()
        d_loss.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in vae.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in disc.parameters())


def test_vae_loss_parts(corpus):
    u = corpus.utterances[0]
    vae = PhonemeVAE(TINY, 64, 11, seed=0)
    lat = vae.encode(u.phonemes, u.features)
    total, parts = vae_loss(vae.decode(lat.mean, u.durations), u.features, u.durations, lat, 0.01, 1.0, 1.0)
    expect = parts["recon"] + 0.01 * parts["kl"] + parts["dur"] + parts["f0"]
    assert total.item() == pytest.approx(expect, rel=1e-5)
    assert all(v >= 0 for v in parts.values())


def test_composite_vae_loss_grad_check(corpus):
    # real-frame discriminator features are stop-gradient constants, so the
    # generator objective is checked against VAE weights only
    u = corpus.utterances[0]
    vae, disc = _tiny64(seed=2)
    noise = np.random.default_rng(0).standard_normal((len(u.phonemes), TINY.d_z))
    with precision(np.float64):
        err = grad_check_params(lambda: vae_step_loss(vae, disc, u, noise, TINY)[0],
                                vae.parameters(), max_per_tensor=3)
    assert err < 1e-3


def test_discriminator_loss_grad_check(corpus):
    u = corpus.utterances[1]
    vae, disc = _tiny64(seed=4)
    noise = np.random.default_rng(1).standard_normal((len(u.phonemes), TINY.d_z))
    with precision(np.float64):
        err = grad_check_params(lambda: vae_step_loss(vae, disc, u, noise, TINY)[1],
                                disc.parameters(), max_per_tensor=4)
    assert err < 1e-3


def test_encode_rejects_empty():
    vae = PhonemeVAE(TINY, 64, 11, seed=0)
    with pytest.raises(ValueError):
        vae.encode(PhonemeSeq([1, 2], [0]), np.zeros((0, 11), dtype=np.float32))

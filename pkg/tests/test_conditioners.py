import numpy as np
import pytest

from phonemeldm.autodiff import Tensor
from phonemeldm.conditioners import ConditionSet, Conditioners, context_embed, corrupt_reference
from phonemeldm.config import LdmConfig
from phonemeldm.synthdata import FeatureFrames, PhonemeSeq, gen_corpus


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(11, 2, 6)


@pytest.fixture(scope="module")
def cond():
    return Conditioners(LdmConfig(), 64, 11, seed=0, ctx_seed=0)


def test_context_embed_deterministic_and_unit():
    e = context_embed([(1, 2), (3,), (1, 2)], seed=0)
    assert e.shape == (3, 32)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(e[0], e[2])
    assert not np.array_equal(e[0], e[1])
    assert np.array_equal(context_embed([(1, 2)], seed=0), context_embed([(1, 2)], seed=0))
    assert not np.array_equal(context_embed([(1, 2)], seed=0), context_embed([(1, 2)], seed=1))


def test_context_embed_no_collisions_on_corpus(corpus):
    words = sorted({w for u in corpus.utterances for w in u.phonemes.words()})
    e = context_embed(words, seed=0)
    d = np.linalg.norm(e[:, None] - e[None], axis=-1) + np.eye(len(words))
    assert d.min() > 1e-3


def test_context_embed_needs_words():
    with pytest.raises(ValueError):
        context_embed([], seed=0)


def test_single_word_attention_weights_are_one(cond):
    seq = PhonemeSeq([4, 9, 13, 2], [0])
    enc = cond.phoneme_encode(seq)
    out = cond.context_encode(enc, context_embed(seq.words(), 0), keep_weights=True)
    np.testing.assert_allclose(cond.context_enc.attn.last_weights, 1.0)
    assert out.shape == (4, 32)


def test_context_encode_rejects_empty(cond):
    with pytest.raises(ValueError):
        cond.context_encode(Tensor(np.zeros((3, 32))), np.zeros((0, 32)))


def test_text_condition_ignores_reference(cond, corpus):
    u = corpus.utterances[0]
    ref = corpus.utterances[1].features
    base = cond.build(u.phonemes, ref)
    for i, r in enumerate(corpus.utterances[2:12]):
        cs = cond.build(u.phonemes, r.features)
        assert cs.c_text.data.tobytes() == base.c_text.data.tobytes()
        if i == 0:
            assert cs.c_spk.data.tobytes() != base.c_spk.data.tobytes()


def test_condition_shapes(cond, corpus):
    u = corpus.utterances[3]
    cs = cond.build(u.phonemes, corpus.utterances[4].features)
    assert cs.c_text.shape == (len(u.phonemes), 32)
    assert cs.c_spk.shape == (len(u.phonemes), 32)


@pytest.mark.parametrize("n_frames", [4, 17, 90])
def test_sixty_speaker_tokens(cond, corpus, n_frames):
    f = corpus.utterances[0].features
    frames = np.resize(f.stacked(), (n_frames, 11))
    assert cond.speaker_tokens(FeatureFrames.from_stacked(frames)).shape == (60, 32)


def test_null_flags_give_exact_zeros(cond, corpus):
    cs = cond.build(corpus.utterances[0].phonemes, corpus.utterances[1].features)
    assert np.any(cs.text().data) and np.any(cs.spk().data)
    nt = cs.with_nulls(True, False)
    assert not np.any(nt.text().data) and nt.spk() is cs.c_spk
    ns = cs.with_nulls(False, True)
    assert not np.any(ns.spk().data) and ns.text() is cs.c_text
    assert ns.spk().data.tobytes() == np.zeros(cs.c_spk.shape, cs.c_spk.dtype).tobytes()


def test_corrupt_reference_identity(corpus):
    f = corpus.utterances[0].features
    out = corrupt_reference(f, np.random.default_rng(0), sigma=0.0, crop_min=1.0)
    assert out.stacked().tobytes() == f.stacked().tobytes()


def test_corrupt_reference_bounds_and_determinism(corpus):
    f = corpus.utterances[2].features
    F = f.n_frames
    for seed in range(30):
        out = corrupt_reference(f, np.random.default_rng(seed))
        assert int(np.ceil(0.5 * F)) <= out.n_frames <= F
        again = corrupt_reference(f, np.random.default_rng(seed))
        assert out.stacked().tobytes() == again.stacked().tobytes()


def test_corrupt_reference_keeps_unvoiced_f0_zero(corpus):
    f = corpus.utterances[1].features
    out = corrupt_reference(f, np.random.default_rng(3), crop_min=1.0)
    assert np.array_equal(out.f0_norm == 0, f.f0_norm == 0)


def test_corrupt_reference_too_short(corpus):
    f = corpus.utterances[0].features.crop(0, 3)
    with pytest.raises(ValueError):
        corrupt_reference(f, np.random.default_rng(0))


def test_condition_set_detached_keeps_values(cond, corpus):
    cs = cond.build(corpus.utterances[0].phonemes, corpus.utterances[1].features)
    d = cs.detached()
    assert isinstance(d, ConditionSet)
    assert d.c_spk.data.tobytes() == cs.c_spk.data.tobytes()
    assert not d.c_spk.requires_grad

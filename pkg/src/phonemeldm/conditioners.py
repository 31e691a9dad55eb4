"""Phoneme-wise condition streams for the diffusion model.

c_text comes from phonemes and hashed word embeddings only. c_spk comes from a
reference utterance: 60 learned prototypes cross-attend over the reference frames
to give speaker tokens, which then serve as values (with a second prototype set
as keys) for a phoneme-wise cross-attention queried by the context features.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .autodiff import nn
from .autodiff import tensor as T
from .config import LdmConfig
from .synthdata import FeatureFrames, PhonemeSeq


def context_embed(words, seed: int, d: int = 32) -> np.ndarray:
    """A fixed pseudo-random unit vector per word, keyed by (seed, word)."""
    words = list(words)
    if not words:
        raise ValueError("need at least one word")
    out = np.empty((len(words), d))
    for i, w in enumerate(words):
        key = f"{seed}:{','.join(str(int(p)) for p in w)}".encode()
        h = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
        v = np.random.default_rng(h).standard_normal(d)
        out[i] = v / np.linalg.norm(v)
    return out


def corrupt_reference(features: FeatureFrames, rng: np.random.Generator, sigma: float = 0.05,
                      crop_min: float = 0.5) -> FeatureFrames:
    """Additive Gaussian noise (f0 of unvoiced frames left at 0) and a random contiguous crop."""
    F = features.n_frames
    if F < 4:
        raise ValueError("reference too short to crop")
    x = features.stacked().astype(np.float64)
    noise = sigma * rng.standard_normal(x.shape)
    f0_col = x.shape[1] - 3
    noise[features.f0_norm == 0, f0_col] = 0.0
    x = x + noise
    lo = int(np.ceil(crop_min * F))
    length = int(rng.integers(lo, F + 1))
    start = int(rng.integers(0, F - length + 1))
    return FeatureFrames.from_stacked(x[start:start + length].astype(np.float32))


@dataclass
class ConditionSet:
    c_text: Tensor
    c_spk: Tensor
    null_text: bool = False
    null_spk: bool = False

    def text(self) -> Tensor:
        return Tensor(np.zeros(self.c_text.shape), dtype=self.c_text.dtype) if self.null_text else self.c_text

    def spk(self) -> Tensor:
        return Tensor(np.zeros(self.c_spk.shape), dtype=self.c_spk.dtype) if self.null_spk else self.c_spk

    def with_nulls(self, null_text: bool, null_spk: bool) -> "ConditionSet":
        return ConditionSet(self.c_text, self.c_spk, null_text, null_spk)

    def detached(self) -> "ConditionSet":
        return ConditionSet(self.c_text.detach(), self.c_spk.detach(), self.null_text, self.null_spk)


class Conditioners(nn.Module):
    def __init__(self, cfg: LdmConfig, vocab: int, n_feat: int, seed: int = 0, ctx_seed: int = 0):
        rng = np.random.default_rng(seed)
        d, h = cfg.d_c, cfg.cond_heads
        self.d_c = d
        self.ctx_seed = ctx_seed
        self.phone_emb = nn.Embedding(rng, vocab, d)
        self.phone_enc = nn.TransformerStack(rng, d, h, cfg.cond_layers)
        self.context_enc = nn.CrossAttentionLayer(rng, d, h)
        self.text_head = nn.TransformerLayer(rng, d, h)
        self.text_out = nn.Linear(rng, d, d)
        self.ref_in = nn.Linear(rng, n_feat, d)
        self.prototypes = nn.Parameter(rng.normal(0, 1, size=(cfg.prototypes, d)))
        self.retriever = [nn.CrossAttentionLayer(rng, d, h) for _ in range(cfg.cond_layers)]
        self.key_prototypes = nn.Parameter(rng.normal(0, 1, size=(cfg.prototypes, d)))
        self.spk_attn = nn.MultiHeadAttention(rng, d, h)
        self.spk_norm = nn.LayerNorm(d)
        self.spk_ff = nn.FeedForward(rng, d)
        self.spk_out = nn.Linear(rng, d, d)

    def phoneme_encode(self, phonemes: PhonemeSeq) -> Tensor:
        P = len(phonemes)
        x = self.phone_emb(phonemes.ids) + Tensor(nn.sinusoidal(np.arange(P), self.d_c))
        return self.phone_enc(x)

    def context_encode(self, phoneme_enc_out: Tensor, context_emb, keep_weights: bool = False) -> Tensor:
        mem = T.as_tensor(context_emb)
        if phoneme_enc_out.shape[0] == 0 or mem.shape[0] == 0:
            raise ValueError("empty inputs")
        return self.context_enc(phoneme_enc_out, mem, keep_weights=keep_weights)

    def context_features(self, phonemes: PhonemeSeq) -> Tensor:
        emb = context_embed(phonemes.words(), self.ctx_seed, self.d_c)
        return self.context_encode(self.phoneme_encode(phonemes), emb)

    def text_condition(self, context: Tensor) -> Tensor:
        return self.text_out(self.text_head(context))

    def speaker_tokens(self, ref: FeatureFrames) -> Tensor:
        frames = ref.stacked()
        F = frames.shape[0]
        if F == 0:
            raise ValueError("empty reference")
        mem = self.ref_in(Tensor(frames))
        tokens = self.prototypes * 1.0
        for layer in self.retriever:
            tokens = layer(tokens, mem)
        return tokens

    def reference_condition(self, ref: FeatureFrames, context: Tensor) -> Tensor:
        tokens = self.speaker_tokens(ref)
        c = self.spk_attn(context, self.key_prototypes, value=tokens)
        c = c + self.spk_ff(self.spk_norm(c))
        return self.spk_out(c)

    def build(self, phonemes: PhonemeSeq, ref: FeatureFrames) -> ConditionSet:
        ctx = self.context_features(phonemes)
        return ConditionSet(self.text_condition(ctx), self.reference_condition(ref, ctx))

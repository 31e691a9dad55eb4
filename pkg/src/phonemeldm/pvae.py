"""Phoneme-level VAE over frame features.

Encoder: phoneme transformer whose outputs query the stacked frame features
through cross-attention; two linear heads give a per-phoneme posterior.
Decoder: latent decoder feeding a duration head, a phoneme f0 head and an
upsampler (repeat by duration + one self-attention layer), then a frame decoder.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Adam, Tensor, no_grad
from .autodiff import nn
from .autodiff import tensor as T
from .config import VaeConfig
from .synthdata import Dataset, FeatureFrames, PhonemeSeq, Utterance

log = logging.getLogger(__name__)

N_FEAT_EXTRA = 3  # f0, periodic amp, aperiodic amp


class DegenerateDurationError(ValueError):
    pass


@dataclass
class PhonemeLatent:
    mean: Tensor    # (P, d_z)
    logvar: Tensor  # (P, d_z), clipped


@dataclass
class VaeOutputs:
    frames: Tensor      # (F, n_feat) stacked channels
    log_dur: Tensor     # (P,)
    f0: Tensor          # (P,)
    durations: np.ndarray

    def features(self) -> FeatureFrames:
        return FeatureFrames.from_stacked(self.frames.data)


def round_durations(log_dur) -> np.ndarray:
    """Round-half-up of exp(log_dur), then a floor of 1 frame per phoneme."""
    raw = np.floor(np.exp(np.asarray(log_dur, dtype=np.float64)) + 0.5).astype(np.int64)
    if np.all(raw <= 0):
        raise DegenerateDurationError("every predicted duration rounds to zero")
    return np.maximum(raw, 1)


def phoneme_mean_f0(f0_norm: np.ndarray, durations: np.ndarray) -> np.ndarray:
    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    return (np.add.reduceat(f0_norm.astype(np.float64), starts) / durations)


def _within_phoneme(durations: np.ndarray) -> np.ndarray:
    """Per-frame (relative position inside phoneme, log duration)."""
    rel = np.concatenate([(np.arange(d) + 0.5) / d for d in durations])
    logd = np.repeat(np.log(durations.astype(np.float64)), durations)
    return np.stack([rel, logd], axis=1)


class PhonemeVAE(nn.Module):
    def __init__(self, cfg: VaeConfig, vocab: int, n_feat: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        d, h, L = cfg.d_model, cfg.heads, cfg.layers
        self.d_model, self.d_z, self.n_feat = d, cfg.d_z, n_feat
        self.logvar_clip = cfg.logvar_clip
        self.phone_emb = nn.Embedding(rng, vocab, d)
        self.phone_enc = nn.TransformerStack(rng, d, h, L)
        self.frame_in = nn.Linear(rng, n_feat, d)
        self.bottleneck = [nn.CrossAttentionLayer(rng, d, h) for _ in range(L)]
        self.mean_head = nn.Linear(rng, d, cfg.d_z)
        self.logvar_head = nn.Linear(rng, d, cfg.d_z)
        self.latent_in = nn.Linear(rng, cfg.d_z, d)
        self.latent_dec = nn.TransformerStack(rng, d, h, L)
        self.dur_head = nn.MLP(rng, d, d, 1)
        self.f0_head = nn.MLP(rng, d, d, 1)
        self.up_pos = nn.Linear(rng, 2, d)
        self.upsampler = nn.TransformerLayer(rng, d, h)
        self.frame_dec = nn.TransformerStack(rng, d, h, L)
        self.frame_out = nn.Linear(rng, d, n_feat)

    # -- encoder
    def encode(self, phonemes: PhonemeSeq, features: FeatureFrames | np.ndarray) -> PhonemeLatent:
        frames = features.stacked() if isinstance(features, FeatureFrames) else np.asarray(features)
        P, F = len(phonemes), frames.shape[0]
        if P == 0 or F == 0:
            raise ValueError("empty input")
        q = self.phone_emb(phonemes.ids) + Tensor(nn.sinusoidal(np.arange(P), self.d_model))
        q = self.phone_enc(q)
        mem = self.frame_in(Tensor(frames)) + Tensor(nn.sinusoidal(np.arange(F), self.d_model))
        for layer in self.bottleneck:
            q = layer(q, mem)
        mean = self.mean_head(q)
        logvar = T.clip(self.logvar_head(q), -self.logvar_clip, self.logvar_clip)
        return PhonemeLatent(mean, logvar)

    # -- decoder
    def decode(self, z: Tensor, teacher_durations=None) -> VaeOutputs:
        z = T.as_tensor(z)
        P = z.shape[0]
        h = self.latent_in(z) + Tensor(nn.sinusoidal(np.arange(P), self.d_model))
        h = self.latent_dec(h)
        log_dur = T.reshape(self.dur_head(h), (P,))
        f0 = T.reshape(self.f0_head(h), (P,))
        if teacher_durations is not None:
            durations = np.asarray(teacher_durations, dtype=np.int64)
            if durations.shape != (P,) or np.any(durations < 1):
                raise ValueError("teacher durations must be positive, one per phoneme")
        else:
            durations = round_durations(log_dur.data)
        F = int(durations.sum())
        up = T.take(h, np.repeat(np.arange(P), durations), axis=0)
        up = up + Tensor(nn.sinusoidal(np.arange(F), self.d_model)) + self.up_pos(Tensor(_within_phoneme(durations)))
        up = self.upsampler(up)
        frames = self.frame_out(self.frame_dec(up))
        return VaeOutputs(frames, log_dur, f0, durations)


def reparam_sample(latent: PhonemeLatent, noise) -> Tensor:
    noise = T.as_tensor(noise)
    if noise.shape != latent.mean.shape:
        raise T.ShapeError(f"noise {noise.shape} vs latent {latent.mean.shape}")
    return latent.mean + T.exp(T.scale(latent.logvar, 0.5)) * noise


def kl_standard_normal(latent: PhonemeLatent) -> Tensor:
    """Mean over phonemes and dims of KL(N(mean, exp(logvar)) || N(0, 1))."""
    m, lv = latent.mean, latent.logvar
    return T.scale(T.mean(m * m + T.exp(lv) - lv), 0.5) - 0.5


def vae_loss(outputs: VaeOutputs, target: FeatureFrames, durations, latent: PhonemeLatent,
             lambda_kl: float, lambda_dur: float, lambda_f0: float) -> tuple[Tensor, dict[str, float]]:
    frames = Tensor(target.stacked(), dtype=outputs.frames.dtype)
    if frames.shape != outputs.frames.shape:
        raise T.ShapeError(f"reconstruction {outputs.frames.shape} vs target {frames.shape}")
    durations = np.asarray(durations, dtype=np.int64)
    recon = T.l1_loss(outputs.frames, frames)
    dur = T.mse_loss(outputs.log_dur, np.log(durations.astype(np.float64)))
    f0 = T.l1_loss(outputs.f0, phoneme_mean_f0(target.f0_norm, durations))
    kl = kl_standard_normal(latent)
    total = recon + T.scale(kl, lambda_kl) + T.scale(dur, lambda_dur) + T.scale(f0, lambda_f0)
    parts = {"recon": recon.item(), "kl": kl.item(), "dur": dur.item(), "f0": f0.item()}
    return total, parts


# ---------------------------------------------------------------- adversarial

class Conv1d(nn.Module):
    """Strided convolution over the frame axis of an (L, C) sequence, zero padded."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3, stride: int = 2):
        self.kernel, self.stride = kernel, stride
        self.proj = nn.Linear(rng, kernel * c_in, c_out)

    def forward(self, x: Tensor) -> Tensor:
        L, C = x.shape
        pad = self.kernel // 2
        zeros = Tensor(np.zeros((pad, C)), dtype=x.dtype)
        xp = T.concat([zeros, x, zeros], axis=0)
        n_out = (L + 2 * pad - self.kernel) // self.stride + 1
        idx = np.arange(n_out)[:, None] * self.stride + np.arange(self.kernel)[None, :]
        win = T.reshape(T.take(xp, idx, axis=0), (n_out, self.kernel * C))
        return self.proj(win)


class Discriminator(nn.Module):
    def __init__(self, n_feat: int, channels: int = 16, layers: int = 3, kernel: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = [n_feat] + [channels] * layers
        self.convs = [Conv1d(rng, dims[i], dims[i + 1], kernel, 2) for i in range(layers)]
        self.out = Conv1d(rng, channels, 1, kernel, 1)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        feats = []
        for conv in self.convs:
            x = T.gelu(conv(x))
            feats.append(x)
        return self.out(x), feats


def lsgan_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    return T.mean((d_real - 1.0) * (d_real - 1.0)) + T.mean(d_fake * d_fake)


def lsgan_g_loss(d_fake: Tensor) -> Tensor:
    return T.mean((d_fake - 1.0) * (d_fake - 1.0))


def adversarial_losses(disc: Discriminator, real_frames, fake_frames: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(d_loss, g_loss, fm_loss). d_loss sees a detached fake; real features are constants."""
    real = T.as_tensor(real_frames)
    fake = T.as_tensor(fake_frames)
    if real.shape != fake.shape:
        raise T.ShapeError(f"real {real.shape} vs fake {fake.shape}")
    real = Tensor(real.data, dtype=fake.dtype)
    d_real, f_real = disc(real)
    d_fake_det, _ = disc(fake.detach())
    d_loss = lsgan_d_loss(d_real, d_fake_det)
    d_fake, f_fake = disc(fake)
    g_loss = lsgan_g_loss(d_fake)
    fm = [T.l1_loss(ff, fr.detach()) for ff, fr in zip(f_fake, f_real)]
    fm_loss = T.scale(sum(fm[1:], fm[0]), 1.0 / len(fm))
    return d_loss, g_loss, fm_loss


# ---------------------------------------------------------------- training

def vae_step_loss(vae: PhonemeVAE, disc: Discriminator, utt: Utterance, noise: np.ndarray, cfg: VaeConfig):
    """Generator objective and discriminator loss for one utterance."""
    latent = vae.encode(utt.phonemes, utt.features)
    z = reparam_sample(latent, noise)
    out = vae.decode(z, utt.durations)
    total, parts = vae_loss(out, utt.features, utt.durations, latent, cfg.lambda_kl, cfg.lambda_dur, cfg.lambda_f0)
    d_loss, g_loss, fm_loss = adversarial_losses(disc, utt.features.stacked(), out.frames)
    gen = total + T.scale(g_loss + fm_loss, cfg.lambda_adv)
    parts.update(g=g_loss.item(), fm=fm_loss.item(), d=d_loss.item(), total=gen.item())
    return gen, d_loss, parts


LOG_FIELDS = ("step", "total", "recon", "kl", "dur", "f0", "g", "fm", "d")


def train_vae(ds: Dataset, cfg: VaeConfig, seed: int, steps: int | None = None,
              vae: PhonemeVAE | None = None, disc: Discriminator | None = None):
    """Returns (vae, disc, log rows). Each row holds batch-mean losses for one step."""
    n_feat = ds.params["d_ling"] + N_FEAT_EXTRA
    ss = np.random.SeedSequence([seed, 1])
    s_vae, s_disc, s_loop = ss.spawn(3)
    vae = vae or PhonemeVAE(cfg, ds.params["vocab"], n_feat, seed=int(s_vae.generate_state(1)[0]))
    disc = disc or Discriminator(n_feat, cfg.disc_channels, cfg.disc_layers, cfg.disc_kernel,
                                 seed=int(s_disc.generate_state(1)[0]))
    opt_g = Adam(vae.parameters(), lr=cfg.lr)
    opt_d = Adam(disc.parameters(), lr=cfg.disc_lr)
    rng = np.random.default_rng(s_loop)
    rows = []
    steps = cfg.steps if steps is None else steps
    for step in range(1, steps + 1):
        batch = rng.choice(len(ds.utterances), size=cfg.batch, replace=False)
        gen_sum = d_sum = None
        acc = dict.fromkeys(LOG_FIELDS[1:], 0.0)
        for i in batch:
            u = ds.utterances[int(i)]
            noise = rng.standard_normal((len(u.phonemes), vae.d_z))
            gen, d_loss, parts = vae_step_loss(vae, disc, u, noise, cfg)
            gen_sum = gen if gen_sum is None else gen_sum + gen
            d_sum = d_loss if d_sum is None else d_sum + d_loss
            for k in acc:
                acc[k] += parts[k] / cfg.batch
        opt_g.zero_grad()
        opt_d.zero_grad()
        T.scale(gen_sum, 1.0 / cfg.batch).backward()
        opt_g.step()
        opt_d.zero_grad()
        T.scale(d_sum, 1.0 / cfg.batch).backward()
        opt_d.step()
        rows.append({"step": step, **acc})
        if step % 100 == 0:
            log.info("vae step %d total %.4f", step, acc["total"])
    return vae, disc, rows


def encode_means(vae: PhonemeVAE, ds: Dataset) -> list[np.ndarray]:
    """Posterior means for every utterance (the diffusion targets)."""
    with no_grad():
        return [vae.encode(u.phonemes, u.features).mean.data.copy() for u in ds.utterances]


def recon_l1(vae: PhonemeVAE, ds: Dataset) -> float:
    """Teacher-forced reconstruction L1 from posterior means, averaged over utterances."""
    vals = []
    with no_grad():
        for u in ds.utterances:
            out = vae.decode(vae.encode(u.phonemes, u.features).mean, u.durations)
            vals.append(float(np.abs(out.frames.data - u.features.stacked()).mean()))
    return float(np.mean(vals))

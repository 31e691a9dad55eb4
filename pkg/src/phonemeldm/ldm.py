"""Phoneme-level latent diffusion: denoiser, L1 eps objective with condition dropout,
and the dual classifier-free-guidance sampler."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Adam, Tensor, no_grad
from .autodiff import nn
from .autodiff import tensor as T
from .conditioners import ConditionSet, Conditioners, corrupt_reference
from .config import LdmConfig
from .schedules import DiffusionSchedule, FastPlan, ancestral_step, fast_step, forward_diffuse
from .synthdata import Dataset, FeatureFrames, PhonemeSeq

log = logging.getLogger(__name__)


class SamplingError(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite latent"):
        super().__init__(f"{msg} at reverse step {step}")
        self.step = step


@dataclass(frozen=True)
class GuidanceWeights:
    w_text: float = 1.0
    w_spk: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.w_text) and np.isfinite(self.w_spk)):
            raise ValueError("guidance weights must be finite")
        if not (0 <= self.w_text <= 5 and 0 <= self.w_spk <= 5):
            warnings.warn(f"guidance weights {self} outside the usual [0, 5] range", stacklevel=2)

    @property
    def is_zero(self) -> bool:
        return self.w_text == 0 and self.w_spk == 0


def dual_cfg(eps_full, eps_spk_only, eps_text_only, eps_null, w: GuidanceWeights):
    """eps_full + w_spk (eps_spk_only - eps_null) + w_text (eps_text_only - eps_null)."""
    arrs = [np.asarray(e) for e in (eps_full, eps_spk_only, eps_text_only, eps_null)]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError(f"shape mismatch: {[a.shape for a in arrs]}")
    full, spk, text, null = arrs
    return full + w.w_spk * (spk - null) + w.w_text * (text - null)


def condition_dropout(rng: np.random.Generator, p_text: float = 0.05, p_spk: float = 0.10,
                      p_both: float = 0.10) -> tuple[bool, bool]:
    """Three independent events (text-only, speaker-only, both); flags are OR-combined."""
    u = rng.random(3)
    both = u[2] < p_both
    return bool(u[0] < p_text or both), bool(u[1] < p_spk or both)


def condition_dropout_batch(rng: np.random.Generator, n: int, p_text: float = 0.05, p_spk: float = 0.10,
                            p_both: float = 0.10) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws of ``condition_dropout`` at once, consuming the stream identically."""
    u = rng.random((n, 3))
    both = u[:, 2] < p_both
    return (u[:, 0] < p_text) | both, (u[:, 1] < p_spk) | both


class Denoiser(nn.Module):
    """Transformer over phoneme tokens. Timestep and each condition stream pass
    through a two-layer MLP and are added to the token states."""

    def __init__(self, cfg: LdmConfig, d_z: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        D = cfg.d_model
        self.d_model = D
        self.in_proj = nn.Linear(rng, d_z, D)
        self.t_mlp = nn.MLP(rng, D, D, D)
        self.spk_mlp = nn.MLP(rng, cfg.d_c, D, D)
        self.text_mlp = nn.MLP(rng, cfg.d_c, D, D)
        self.body = nn.TransformerStack(rng, D, cfg.heads, cfg.layers)
        self.out = nn.Linear(rng, D, d_z)

    def forward(self, z_t, t: float, c_spk: Tensor, c_text: Tensor) -> Tensor:
        z_t = T.as_tensor(z_t)
        P = z_t.shape[-2]
        if c_spk.shape[-2] != P or c_text.shape[-2] != P:
            raise T.ShapeError(f"conditions have {c_spk.shape[-2]}/{c_text.shape[-2]} rows, latent has {P}")
        t_emb = Tensor(nn.sinusoidal([float(t)], self.d_model))
        h = self.in_proj(z_t) + Tensor(nn.sinusoidal(np.arange(P), self.d_model))
        h = h + T.reshape(self.t_mlp(t_emb), (self.d_model,)) + self.spk_mlp(c_spk) + self.text_mlp(c_text)
        return self.out(self.body(h))


def denoise_eps(denoiser: Denoiser, z_t, t: float, conditions: ConditionSet) -> Tensor:
    """Noise prediction with null flags realized as zero tensors."""
    z_t = T.as_tensor(z_t)
    out = denoiser(z_t, t, conditions.spk(), conditions.text())
    if out.shape != z_t.shape:
        raise T.ShapeError(f"denoiser output {out.shape} vs latent {z_t.shape}")
    return out


def ldm_loss(denoiser: Denoiser, mu: np.ndarray, conditions: ConditionSet, schedule: DiffusionSchedule,
             rng: np.random.Generator, cfg: LdmConfig) -> tuple[Tensor, dict]:
    """Condition dropout, then t ~ U{1..T}, eps ~ N(0, I); mean L1 between eps and its prediction."""
    null_text, null_spk = condition_dropout(rng, cfg.p_drop_text, cfg.p_drop_spk, cfg.p_drop_both)
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(mu.shape)
    z_t = forward_diffuse(np.asarray(mu, dtype=np.float64), t, eps, schedule)
    pred = denoise_eps(denoiser, Tensor(z_t), t, conditions.with_nulls(null_text, null_spk))
    loss = T.l1_loss(pred, Tensor(eps, dtype=pred.dtype))
    return loss, {"t": t, "null_text": null_text, "null_spk": null_spk}


EpsFn = Callable[[np.ndarray, float, bool, bool], np.ndarray]


def sample_latent(eps_fn: EpsFn, shape, w: GuidanceWeights, schedule: DiffusionSchedule, mode: str,
                  rng: np.random.Generator, plan: FastPlan | None = None,
                  trace: list | None = None, variance: str = "beta") -> np.ndarray:
    """Reverse diffusion from z ~ N(0, I). ``eps_fn(z, t, null_text, null_spk)``.

    Each step evaluates the four condition combinations and applies ``dual_cfg``;
    with both weights zero only the fully conditioned call is made (identical result).
    ``variance`` selects the reverse-step noise level (see ``reverse_update``).
    """
    if mode == "full":
        steps = [(t, float(t)) for t in range(schedule.T, 0, -1)]
    elif mode == "fast":
        if plan is None:
            raise ValueError("fast mode needs a FastPlan")
        steps = [(s, float(plan.mapped_t[s])) for s in range(plan.steps, 0, -1)]
    else:
        raise ValueError(f"unknown sampler mode {mode!r}")
    z = rng.standard_normal(shape)
    for k, t_cont in steps:
        if w.is_zero:
            eps = np.asarray(eps_fn(z, t_cont, False, False), dtype=np.float64)
        else:
            eps = dual_cfg(eps_fn(z, t_cont, False, False), eps_fn(z, t_cont, True, False),
                           eps_fn(z, t_cont, False, True), eps_fn(z, t_cont, True, True), w)
            eps = np.asarray(eps, dtype=np.float64)
        xi = rng.standard_normal(shape) if k > 1 else None
        if mode == "full":
            z = ancestral_step(z, eps, k, schedule, xi, variance)
        else:
            z = fast_step(z, eps, k, plan, xi, variance)
        if not np.all(np.isfinite(z)):
            raise SamplingError(k)
        if trace is not None:
            trace.append((t_cont, float(np.linalg.norm(eps) / np.sqrt(eps.size))))
    return z


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "eps_rms"])
        for t, n in trace:
            w.writerow([repr(t), repr(n)])


class LatentDiffusion(nn.Module):
    """Conditioners plus denoiser, trained jointly on VAE posterior means."""

    def __init__(self, cfg: LdmConfig, vocab: int, n_feat: int, d_z: int, seed: int = 0):
        ss = np.random.SeedSequence([seed, 2])
        s_c, s_d = ss.spawn(2)
        self.cfg = cfg
        self.d_z = d_z
        self.conditioners = Conditioners(cfg, vocab, n_feat, seed=int(s_c.generate_state(1)[0]), ctx_seed=seed)
        self.denoiser = Denoiser(cfg, d_z, seed=int(s_d.generate_state(1)[0]))

    def conditions(self, phonemes: PhonemeSeq, ref: FeatureFrames) -> ConditionSet:
        return self.conditioners.build(phonemes, ref)

    def eps_fn(self, conditions: ConditionSet) -> EpsFn:
        conditions = conditions.detached()

        def fn(z, t, null_text, null_spk):
            with no_grad():
                return denoise_eps(self.denoiser, Tensor(z), t, conditions.with_nulls(null_text, null_spk)).data
        return fn

    def sample(self, phonemes: PhonemeSeq, ref: FeatureFrames, w: GuidanceWeights, schedule: DiffusionSchedule,
               mode: str, rng: np.random.Generator, plan: FastPlan | None = None, n: int | None = None,
               trace: list | None = None, variance: str = "beta") -> np.ndarray:
        """``n`` latents (n, P, d_z) if ``n`` is given, else a single (P, d_z) latent."""
        with no_grad():
            conds = self.conditions(phonemes, ref)
        shape = (len(phonemes), self.d_z) if n is None else (n, len(phonemes), self.d_z)
        return sample_latent(self.eps_fn(conds), shape, w, schedule, mode, rng, plan, trace, variance)


LOG_FIELDS = ("step", "loss")


def pick_reference(ds: Dataset, utt_index: int, rng: np.random.Generator, by_speaker=None) -> int:
    """Another utterance of the same speaker when one exists."""
    by_speaker = by_speaker or ds.by_speaker()
    pool = [i for i in by_speaker[ds.utterances[utt_index].speaker] if i != utt_index] or [utt_index]
    return pool[int(rng.integers(len(pool)))]


def train_ldm(ds: Dataset, mus: list[np.ndarray], cfg: LdmConfig, schedule: DiffusionSchedule, seed: int,
              d_z: int, steps: int | None = None, model: LatentDiffusion | None = None):
    """Returns (model, log rows)."""
    n_feat = ds.params["d_ling"] + 3
    model = model or LatentDiffusion(cfg, ds.params["vocab"], n_feat, d_z, seed=seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    by_speaker = ds.by_speaker()
    rows = []
    steps = cfg.steps if steps is None else steps
    for step in range(1, steps + 1):
        batch = rng.choice(len(ds.utterances), size=min(cfg.batch, len(ds.utterances)), replace=False)
        total = None
        for i in batch:
            u = ds.utterances[int(i)]
            ref_u = ds.utterances[pick_reference(ds, int(i), rng, by_speaker)]
            ref = corrupt_reference(ref_u.features, rng, cfg.ref_noise, cfg.ref_crop_min)
            conds = model.conditions(u.phonemes, ref)
            loss, _ = ldm_loss(model.denoiser, mus[int(i)], conds, schedule, rng, cfg)
            total = loss if total is None else total + loss
        total = T.scale(total, 1.0 / len(batch))
        opt.zero_grad()
        total.backward()
        opt.step()
        rows.append({"step": step, "loss": total.item()})
        if step % 100 == 0:
            log.info("ldm step %d loss %.4f", step, total.item())
    return model, rows

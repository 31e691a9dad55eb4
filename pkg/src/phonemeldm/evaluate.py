"""Metrics on trained toy models: speaker separation of c_spk, full-vs-fast
sampler agreement, and the per-cell measures used by weight sweeps."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .ldm import GuidanceWeights, LatentDiffusion
from .pvae import DegenerateDurationError, PhonemeVAE
from .schedules import DiffusionSchedule, FastPlan
from .synthdata import Dataset, FeatureFrames, PhonemeSeq


def separation_pairs(ds: Dataset, n_pairs: int = 50, seed: int = 0) -> list[tuple[int, int, int, int]]:
    """Seeded (text, ref_a, ref_same, ref_other) utterance indices.

    ref_a and ref_same are distinct utterances of one speaker; ref_other belongs
    to a different speaker.
    """
    rng = np.random.default_rng(seed)
    by_spk = ds.by_speaker()
    speakers = sorted(s for s, idx in by_spk.items() if len(idx) >= 2)
    if len(speakers) < 1 or len(by_spk) < 2:
        raise ValueError("need two speakers and two utterances for one of them")
    out = []
    for _ in range(n_pairs):
        text = int(rng.integers(len(ds.utterances)))
        s = speakers[int(rng.integers(len(speakers)))]
        a, b = rng.choice(by_spk[s], 2, replace=False)
        others = [k for k in sorted(by_spk) if k != s]
        o = others[int(rng.integers(len(others)))]
        c = by_spk[o][int(rng.integers(len(by_spk[o])))]
        out.append((text, int(a), int(b), int(c)))
    return out


def separation_ratio(model: LatentDiffusion, ds: Dataset, n_pairs: int = 50, seed: int = 0) -> dict:
    """Mean per-phoneme L2 between c_spk of same-speaker references over the same
    quantity for different-speaker references, both under a shared text query."""
    same, diff = [], []
    cond = model.conditioners
    with no_grad():
        for text, a, b, c in separation_pairs(ds, n_pairs, seed):
            ctx = cond.context_features(ds.utterances[text].phonemes)
            ca, cb, cc = (cond.reference_condition(ds.utterances[i].features, ctx).data for i in (a, b, c))
            same.append(float(np.linalg.norm(ca - cb, axis=1).mean()))
            diff.append(float(np.linalg.norm(ca - cc, axis=1).mean()))
    return {"same": float(np.mean(same)), "different": float(np.mean(diff)),
            "ratio": float(np.mean(same) / np.mean(diff)), "pairs": n_pairs}


def full_vs_fast(model: LatentDiffusion, phonemes: PhonemeSeq, ref: FeatureFrames, w: GuidanceWeights,
                 schedule: DiffusionSchedule, plan: FastPlan, n: int = 500, seed: int = 0,
                 variance: str = "beta") -> dict:
    """Per-dimension mean gap between the two samplers in units of the full-mode sd."""
    rng_full, rng_fast = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 7]).spawn(2))
    t0 = time.perf_counter()
    full = model.sample(phonemes, ref, w, schedule, "full", rng_full, n=n, variance=variance)
    t_full = time.perf_counter() - t0
    t0 = time.perf_counter()
    fast = model.sample(phonemes, ref, w, schedule, "fast", rng_fast, plan=plan, n=n, variance=variance)
    t_fast = time.perf_counter() - t0
    sd = full.std(axis=0)
    gap = np.abs(full.mean(axis=0) - fast.mean(axis=0)) / sd
    return {"n": n, "w_text": w.w_text, "w_spk": w.w_spk, "max_gap": float(gap.max()),
            "mean_gap": float(gap.mean()), "variance": variance, "sd_ratio": float((fast.std(axis=0) / sd).mean()),
            "seconds_full": t_full, "seconds_fast": t_fast}


@dataclass
class SpeakerCentroids:
    """Mean VAE latent per (speaker, phoneme) with a per-speaker fallback."""
    by_phoneme: dict[tuple[int, int], np.ndarray]
    by_speaker: dict[int, np.ndarray]

    @classmethod
    def build(cls, ds: Dataset, mus: list[np.ndarray]) -> "SpeakerCentroids":
        rows: dict[tuple[int, int], list] = {}
        spk_rows: dict[int, list] = {}
        for u, mu in zip(ds.utterances, mus):
            for pid, row in zip(u.phonemes.ids, mu):
                rows.setdefault((u.speaker, int(pid)), []).append(row)
                spk_rows.setdefault(u.speaker, []).append(row)
        return cls({k: np.mean(v, axis=0) for k, v in rows.items()},
                   {k: np.mean(v, axis=0) for k, v in spk_rows.items()})

    def target(self, speaker: int, ids) -> np.ndarray:
        return np.stack([self.by_phoneme.get((speaker, int(p)), self.by_speaker[speaker]) for p in ids])

    def distance(self, latent: np.ndarray, speaker: int, ids) -> float:
        return float(np.linalg.norm(latent - self.target(speaker, ids), axis=-1).mean())


def decode_latent(vae: PhonemeVAE, latent: np.ndarray):
    with no_grad():
        return vae.decode(latent)


def duration_mae(vae: PhonemeVAE, latent: np.ndarray, truth: np.ndarray) -> float:
    """Frames of absolute error between decoded and ground-truth durations."""
    try:
        out = decode_latent(vae, latent)
    except DegenerateDurationError:
        return float(np.abs(truth).mean())
    return float(np.abs(out.durations - truth).mean())


def sweep_items(ds: Dataset, n_items: int, seed: int) -> list[tuple[int, int]]:
    """(text, ref) pairs where ref is another utterance of the text's speaker."""
    from .ldm import pick_reference

    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    texts = rng.choice(len(ds.utterances), size=min(n_items, len(ds.utterances)), replace=False)
    by_spk = ds.by_speaker()
    return [(int(t), pick_reference(ds, int(t), rng, by_spk)) for t in texts]


def sweep_cell(vae: PhonemeVAE, model: LatentDiffusion, ds: Dataset, centroids: SpeakerCentroids,
               items, w: GuidanceWeights, schedule: DiffusionSchedule, mode: str, plan: FastPlan | None,
               seed: int, variance: str = "beta") -> dict:
    dist, mae, seconds = [], [], 0.0
    for k, (text, ref) in enumerate(items):
        u, r = ds.utterances[text], ds.utterances[ref]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13, k]))
        t0 = time.perf_counter()
        z = model.sample(u.phonemes, r.features, w, schedule, mode, rng, plan=plan, variance=variance)
        seconds += time.perf_counter() - t0
        dist.append(centroids.distance(z, r.speaker, u.phonemes.ids))
        mae.append(duration_mae(vae, z, u.durations))
    return {"w_text": w.w_text, "w_spk": w.w_spk, "centroid_distance": float(np.mean(dist)),
            "duration_mae": float(np.mean(mae)), "wall_seconds": seconds}


def monotone_transitions(rows: list[dict]) -> tuple[int, int]:
    """Count grid steps along increasing w_spk (fixed w_text) where the centroid
    distance does not increase. Returns (non-increasing, total)."""
    ok = total = 0
    for wt in sorted({r["w_text"] for r in rows}):
        col = sorted((r for r in rows if r["w_text"] == wt), key=lambda r: r["w_spk"])
        for a, b in zip(col, col[1:]):
            total += 1
            ok += int(b["centroid_distance"] <= a["centroid_distance"])
    return ok, total

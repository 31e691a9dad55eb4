"""Procedural stand-in corpus: phoneme sequences, speakers, and frame-level features.

Each utterance has a linguistic vector per frame (phoneme embedding + speaker
offset + jitter), a normalized f0 track (exact 0 on unvoiced frames), and
periodic/aperiodic amplitudes. Ground-truth durations are known by construction.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blobio import (
    BlobShapeError, ChecksumError, LE_F32, ManifestError, read_checked, sha256_hex, to_le_f32,
)

DATASET_FORMAT = "phonemeldm-dataset-v1"
FEATURE_FIELDS = ("linguistic", "f0_norm", "amp_periodic", "amp_aperiodic")

__all__ = [
    "ChecksumError", "BlobShapeError", "ManifestError", "Dataset", "FeatureFrames", "PhonemeSeq",
    "SpeakerProfile", "Utterance", "gen_corpus", "midi_normalize", "read_dataset", "write_dataset",
]


def midi_normalize(f0_hz):
    """MIDI note number divided by 84; 0 Hz (unvoiced) maps to 0."""
    f = np.asarray(f0_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("f0 must be non-negative")
    out = np.zeros_like(f)
    voiced = f > 0
    out[voiced] = (69.0 + 12.0 * np.log2(f[voiced] / 440.0)) / 84.0
    return float(out) if out.ndim == 0 else out


@dataclass
class PhonemeSeq:
    ids: np.ndarray
    word_starts: np.ndarray  # start index of each word; first is 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.word_starts = np.asarray(self.word_starts, dtype=np.int64)
        if self.ids.size == 0:
            raise ValueError("empty phoneme sequence")
        ws = self.word_starts
        if ws.size == 0 or ws[0] != 0 or np.any(np.diff(ws) <= 0) or ws[-1] >= self.ids.size:
            raise ValueError("word boundaries must be sorted starts within range, beginning at 0")

    def __len__(self) -> int:
        return int(self.ids.size)

    def words(self) -> list[tuple[int, ...]]:
        bounds = list(self.word_starts) + [self.ids.size]
        return [tuple(int(i) for i in self.ids[bounds[k]:bounds[k + 1]]) for k in range(len(bounds) - 1)]

    def word_index(self) -> np.ndarray:
        """Word number of each phoneme."""
        idx = np.zeros(self.ids.size, dtype=np.int64)
        idx[self.word_starts[1:]] = 1
        return np.cumsum(idx)


@dataclass
class FeatureFrames:
    linguistic: np.ndarray     # (F, d_ling)
    f0_norm: np.ndarray        # (F,)
    amp_periodic: np.ndarray   # (F,)
    amp_aperiodic: np.ndarray  # (F,)

    @property
    def n_frames(self) -> int:
        return int(self.f0_norm.shape[0])

    def stacked(self) -> np.ndarray:
        """(F, d_ling + 3) channel matrix: linguistic | f0 | periodic | aperiodic."""
        return np.concatenate(
            [self.linguistic, self.f0_norm[:, None], self.amp_periodic[:, None], self.amp_aperiodic[:, None]],
            axis=1,
        ).astype(np.float32)

    @classmethod
    def from_stacked(cls, x: np.ndarray) -> "FeatureFrames":
        x = np.asarray(x, dtype=np.float32)
        return cls(x[:, :-3].copy(), x[:, -3].copy(), x[:, -2].copy(), x[:, -1].copy())

    def crop(self, start: int, length: int) -> "FeatureFrames":
        sl = slice(start, start + length)
        return FeatureFrames(self.linguistic[sl], self.f0_norm[sl], self.amp_periodic[sl], self.amp_aperiodic[sl])


@dataclass
class SpeakerProfile:
    speaker_id: int
    seed: int
    base_f0: float
    f0_range: float   # semitones
    amp_gain: float
    aper_gain: float
    rate: float
    offsets: np.ndarray  # (V, d_ling) float32


def make_speaker_profile(speaker_id: int, seed: int, vocab: int, d_ling: int) -> SpeakerProfile:
    rng = np.random.default_rng(seed)
    return SpeakerProfile(
        speaker_id=speaker_id,
        seed=seed,
        base_f0=float(rng.uniform(90.0, 260.0)),
        f0_range=float(rng.uniform(1.0, 4.0)),
        amp_gain=float(rng.uniform(0.6, 1.4)),
        aper_gain=float(rng.uniform(0.5, 1.5)),
        rate=float(rng.uniform(0.8, 1.3)),
        offsets=rng.normal(0.0, 0.35, size=(vocab, d_ling)).astype(np.float32),
    )


@dataclass
class Utterance:
    utt_id: str
    speaker: int
    phonemes: PhonemeSeq
    durations: np.ndarray
    features: FeatureFrames


@dataclass
class Dataset:
    seed: int
    params: dict
    phoneme_table: np.ndarray  # (V, d_ling) float32
    voiced: np.ndarray         # (V,) bool
    amp_class: np.ndarray      # (V,) float32
    base_duration: np.ndarray  # (V,) int64
    speakers: list[SpeakerProfile]
    utterances: list[Utterance]

    def by_speaker(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, u in enumerate(self.utterances):
            out.setdefault(u.speaker, []).append(i)
        return out

    def phoneme_stats(self, utt: Utterance) -> tuple[np.ndarray, np.ndarray]:
        """Generator-side Gaussian stats (mean, variance) of each phoneme's linguistic frames."""
        spk = self.speakers[utt.speaker]
        ids = utt.phonemes.ids
        mean = self.phoneme_table[ids].astype(np.float64) + spk.offsets[ids]
        var = np.full_like(mean, max(self.params["jitter"], 1e-3) ** 2)
        return mean, var

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(_manifest_core(self), sort_keys=True).encode())
        for arr in _float_arrays(self).values():
            h.update(to_le_f32(arr).tobytes())
        return h.hexdigest()


def _no_repeat_join(a: tuple, b: tuple) -> bool:
    return not a or not b or a[-1] != b[0]


def _make_lexicon(rng, vocab: int, size: int) -> list[tuple[int, ...]]:
    lex: list[tuple[int, ...]] = []
    seen = set()
    while len(lex) < size:
        n = int(rng.integers(2, 5))
        word = [int(rng.integers(vocab))]
        while len(word) < n:
            p = int(rng.integers(vocab))
            if p != word[-1]:
                word.append(p)
        if tuple(word) not in seen:
            seen.add(tuple(word))
            lex.append(tuple(word))
    return lex


def _make_sentence(rng, lexicon, lo: int, hi: int) -> PhonemeSeq:
    while True:
        target = int(rng.integers(lo, hi + 1))
        words: list[tuple[int, ...]] = []
        n = 0
        while n < target:
            w = lexicon[int(rng.integers(len(lexicon)))]
            if words and not _no_repeat_join(words[-1], w):
                continue
            words.append(w)
            n += len(w)
        if n <= hi:
            ids = [p for w in words for p in w]
            starts = np.cumsum([0] + [len(w) for w in words[:-1]])
            return PhonemeSeq(ids, starts)


def _render(rng, ds_tables: dict, spk: SpeakerProfile, seq: PhonemeSeq, jitter: float):
    ids = seq.ids
    base = ds_tables["base_duration"][ids]
    dur = np.clip(np.rint(base * spk.rate).astype(np.int64) + rng.integers(-1, 2, size=ids.size), 2, 12)
    F = int(dur.sum())
    owner = np.repeat(np.arange(ids.size), dur)
    within = np.concatenate([(np.arange(d) + 0.5) / d for d in dur])
    frame_ids = ids[owner]
    d_ling = ds_tables["phoneme_table"].shape[1]

    ling = ds_tables["phoneme_table"][frame_ids] + spk.offsets[frame_ids] \
        + jitter * rng.standard_normal((F, d_ling))

    voiced = ds_tables["voiced"][frame_ids]
    pos = np.arange(F) / max(F - 1, 1)
    phase = rng.uniform(0, 2 * np.pi)
    semitones = spk.f0_range * np.sin(phase + 2.5 * np.pi * pos) - 2.0 * pos
    f0_hz = np.where(voiced, spk.base_f0 * 2.0 ** (semitones / 12.0), 0.0)
    f0_norm = midi_normalize(f0_hz)

    env = 0.75 + 0.25 * np.sin(np.pi * within)
    cls_amp = ds_tables["amp_class"][frame_ids]
    amp_p = np.where(voiced, spk.amp_gain * cls_amp * env, 0.02 * spk.amp_gain)
    amp_ap = np.where(voiced, 0.05 * spk.aper_gain, spk.aper_gain * cls_amp * env)

    feats = FeatureFrames(
        linguistic=ling.astype(np.float32),
        f0_norm=f0_norm.astype(np.float32),
        amp_periodic=amp_p.astype(np.float32),
        amp_aperiodic=amp_ap.astype(np.float32),
    )
    return dur, feats


def gen_corpus(seed: int, n_speakers: int, utts_per_speaker: int, phoneme_len_range=(6, 14),
               jitter: float = 0.05, vocab: int = 64, d_ling: int = 8, lexicon_size: int = 48) -> Dataset:
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("counts must be >= 1")
    lo, hi = phoneme_len_range
    if not 1 <= lo <= hi:
        raise ValueError("bad phoneme_len_range")
    ss = np.random.SeedSequence(seed)
    s_tables, s_lex, s_spk, s_utt = ss.spawn(4)
    rng = np.random.default_rng(s_tables)
    tables = {
        "phoneme_table": rng.standard_normal((vocab, d_ling)).astype(np.float32),
        "voiced": (np.arange(vocab) % 5) != 0,
        "amp_class": rng.uniform(0.3, 1.0, size=vocab).astype(np.float32),
        "base_duration": rng.integers(2, 9, size=vocab).astype(np.int64),
    }
    lexicon = _make_lexicon(np.random.default_rng(s_lex), vocab, lexicon_size)
    spk_seeds = np.random.default_rng(s_spk).integers(0, 2**31 - 1, size=n_speakers)
    speakers = [make_speaker_profile(i, int(s), vocab, d_ling) for i, s in enumerate(spk_seeds)]

    utt_rng = np.random.default_rng(s_utt)
    utterances = []
    for spk in speakers:
        for k in range(utts_per_speaker):
            seq = _make_sentence(utt_rng, lexicon, lo, hi)
            dur, feats = _render(utt_rng, tables, spk, seq, jitter)
            utterances.append(Utterance(f"s{spk.speaker_id:02d}_u{k:03d}", spk.speaker_id, seq, dur, feats))
    params = {
        "n_speakers": n_speakers, "utts_per_speaker": utts_per_speaker,
        "phoneme_len_range": [lo, hi], "jitter": float(jitter), "vocab": vocab, "d_ling": d_ling,
        "lexicon_size": lexicon_size,
    }
    return Dataset(seed, params, tables["phoneme_table"], tables["voiced"], tables["amp_class"],
                   tables["base_duration"], speakers, utterances)


# ---------------------------------------------------------------- on-disk format

def _float_arrays(ds: Dataset) -> dict[str, np.ndarray]:
    """Every float array of the dataset, grouped by blob name, concatenated in order."""
    return {
        "tables": np.concatenate([ds.phoneme_table.ravel(), ds.amp_class.ravel()]
                                 + [s.offsets.ravel() for s in ds.speakers]),
        **{name: np.concatenate([getattr(u.features, name).ravel() for u in ds.utterances])
           for name in FEATURE_FIELDS},
    }


def _manifest_core(ds: Dataset) -> dict:
    V, d = ds.phoneme_table.shape
    off_tables = V * d + V
    speakers = []
    for i, s in enumerate(ds.speakers):
        speakers.append({
            "speaker_id": s.speaker_id, "seed": s.seed, "base_f0": s.base_f0, "f0_range": s.f0_range,
            "amp_gain": s.amp_gain, "aper_gain": s.aper_gain, "rate": s.rate,
            "offsets": {"offset": off_tables + i * V * d, "shape": [V, d]},
        })
    utts, cursor = [], {name: 0 for name in FEATURE_FIELDS}
    for u in ds.utterances:
        arrays = {}
        for name in FEATURE_FIELDS:
            arr = getattr(u.features, name)
            arrays[name] = {"offset": cursor[name], "shape": list(arr.shape)}
            cursor[name] += arr.size
        utts.append({
            "utt_id": u.utt_id, "speaker": u.speaker, "phonemes": u.phonemes.ids.tolist(),
            "word_starts": u.phonemes.word_starts.tolist(), "durations": u.durations.tolist(),
            "arrays": arrays,
        })
    return {
        "format": DATASET_FORMAT,
        "seed": ds.seed,
        "params": ds.params,
        "tables": {
            "phoneme_table": {"offset": 0, "shape": [V, d]},
            "amp_class": {"offset": V * d, "shape": [V]},
            "voiced": ds.voiced.astype(int).tolist(),
            "base_duration": ds.base_duration.tolist(),
        },
        "speakers": speakers,
        "utterances": utts,
    }


def write_dataset(ds: Dataset, path) -> Path:
    """Write ``dataset.json`` plus one ``<name>.f32`` blob per float array group."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_core(ds)
    blobs = {}
    for name, arr in _float_arrays(ds).items():
        raw = to_le_f32(arr).tobytes()
        (out / f"{name}.f32").write_bytes(raw)
        blobs[name] = {"file": f"{name}.f32", "sha256": sha256_hex(raw), "nbytes": len(raw)}
    manifest["blobs"] = blobs
    man = out / "dataset.json"
    man.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return man


def _slice(blob: np.ndarray, spec: dict, what: str) -> np.ndarray:
    shape = tuple(int(s) for s in spec["shape"])
    n = int(np.prod(shape, dtype=np.int64))
    off = int(spec["offset"])
    if off < 0 or off + n > blob.size:
        raise BlobShapeError(f"{what}: shape {shape} at offset {off} exceeds blob of {blob.size} values")
    return blob[off:off + n].reshape(shape).astype(np.float32)


def read_dataset(path) -> Dataset:
    root = Path(path)
    try:
        m = json.loads((root / "dataset.json").read_text())
        if m.get("format") != DATASET_FORMAT:
            raise ManifestError(f"unknown dataset format {m.get('format')!r}")
        blobs = {}
        for name, info in m["blobs"].items():
            raw = read_checked(root / info["file"], info["sha256"])
            blobs[name] = np.frombuffer(raw, dtype=LE_F32)
        tables = m["tables"]
        pt = _slice(blobs["tables"], tables["phoneme_table"], "phoneme_table")
        amp_class = _slice(blobs["tables"], tables["amp_class"], "amp_class")
        speakers = [
            SpeakerProfile(s["speaker_id"], s["seed"], s["base_f0"], s["f0_range"], s["amp_gain"],
                           s["aper_gain"], s["rate"], _slice(blobs["tables"], s["offsets"], "offsets"))
            for s in m["speakers"]
        ]
        used = {name: 0 for name in FEATURE_FIELDS}
        utterances = []
        for u in m["utterances"]:
            arrs = {name: _slice(blobs[name], u["arrays"][name], f"{u['utt_id']}.{name}") for name in FEATURE_FIELDS}
            for name in FEATURE_FIELDS:
                used[name] += arrs[name].size
            durs = np.asarray(u["durations"], dtype=np.int64)
            F = arrs["f0_norm"].shape[0]
            if arrs["linguistic"].shape[0] != F or any(arrs[n].shape != (F,) for n in FEATURE_FIELDS[1:]) \
                    or int(durs.sum()) != F or len(durs) != len(u["phonemes"]):
                raise BlobShapeError(f"{u['utt_id']}: inconsistent frame counts")
            utterances.append(Utterance(u["utt_id"], u["speaker"], PhonemeSeq(u["phonemes"], u["word_starts"]),
                                        durs, FeatureFrames(**arrs)))
        for name in FEATURE_FIELDS:
            if used[name] != blobs[name].size:
                raise BlobShapeError(f"{name}: manifest covers {used[name]} of {blobs[name].size} values")
        return Dataset(m["seed"], m["params"], pt, np.asarray(tables["voiced"], dtype=bool), amp_class,
                       np.asarray(tables["base_duration"], dtype=np.int64), speakers, utterances)
    except (KeyError, TypeError, json.JSONDecodeError, FileNotFoundError) as exc:
        raise ManifestError(f"malformed dataset manifest in {root}: {exc}") from exc


def aligner_accuracy(ds: Dataset) -> float:
    """Fraction of phonemes whose MAS duration equals the generator's ground truth."""
    from .aligner import align

    hit = total = 0
    for u in ds.utterances:
        mean, var = ds.phoneme_stats(u)
        d = align(mean, var, u.features.linguistic)
        hit += int((d == u.durations).sum())
        total += d.size
    return hit / total


def speaker_offset_min_distance(ds: Dataset) -> float:
    dists = [float(np.linalg.norm(a.offsets - b.offsets))
             for i, a in enumerate(ds.speakers) for b in ds.speakers[i + 1:]]
    return min(dists) if dists else math.inf

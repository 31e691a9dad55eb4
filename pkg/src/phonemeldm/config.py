"""Run configuration: TOML in, TOML/JSON out, stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .schedules import FAST_BETAS


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_speakers: int = 8
    utts_per_speaker: int = 20
    phoneme_len_range: tuple[int, int] = (6, 14)
    vocab: int = 64
    d_ling: int = 8
    jitter: float = 0.05
    lexicon_size: int = 48


@dataclass
class VaeConfig:
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    d_z: int = 8
    disc_channels: int = 16
    disc_layers: int = 3
    disc_kernel: int = 3
    lambda_kl: float = 0.01
    lambda_dur: float = 1.0
    lambda_f0: float = 1.0
    lambda_adv: float = 0.1
    logvar_clip: float = 10.0
    lr: float = 3e-4
    disc_lr: float = 3e-4
    steps: int = 500
    batch: int = 4


@dataclass
class LdmConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    d_c: int = 32
    cond_heads: int = 4
    cond_layers: int = 2
    prototypes: int = 60
    p_drop_text: float = 0.05
    p_drop_spk: float = 0.10
    p_drop_both: float = 0.10
    ref_noise: float = 0.05
    ref_crop_min: float = 0.5
    lr: float = 1e-3
    steps: int = 4000
    batch: int = 8


@dataclass
class ScheduleConfig:
    T: int = 200
    beta1: float = 1e-4
    betaT: float = 0.03
    fast_betas: tuple[float, ...] = FAST_BETAS


@dataclass
class SamplerConfig:
    w_text: float = 1.0
    w_spk: float = 1.0
    mode: str = "fast"
    variance: str = "beta"


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    ldm: LdmConfig = field(default_factory=LdmConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        c, v, l, s = self.corpus, self.vae, self.ldm, self.schedule
        lo, hi = c.phoneme_len_range
        checks = [
            (c.n_speakers >= 1 and c.utts_per_speaker >= 1, "corpus counts must be >= 1"),
            (1 <= lo <= hi, "phoneme_len_range must satisfy 1 <= lo <= hi"),
            (c.jitter >= 0, "jitter must be >= 0"),
            (v.d_model % v.heads == 0, "vae.d_model must divide by heads"),
            (l.d_model % l.heads == 0 and l.d_c % l.cond_heads == 0, "ldm widths must divide by heads"),
            (all(0 <= p < 1 for p in (l.p_drop_text, l.p_drop_spk, l.p_drop_both)), "dropout probs in [0, 1)"),
            (0 < l.ref_crop_min <= 1, "ref_crop_min in (0, 1]"),
            (s.T >= 2 and 0 < s.beta1 < s.betaT < 1, "schedule bounds"),
            (all(0 < b < 1 for b in s.fast_betas), "fast betas in (0, 1)"),
            (self.sampler.mode in ("full", "fast"), "sampler.mode must be full or fast"),
            (self.sampler.variance in ("beta", "posterior"), "sampler.variance must be beta or posterior"),
            (v.steps >= 0 and l.steps >= 0 and v.batch >= 1 and l.batch >= 1, "steps/batch"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {"corpus": CorpusConfig, "vae": VaeConfig, "ldm": LdmConfig,
                    "schedule": ScheduleConfig, "sampler": SamplerConfig}
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                sec = sections[key]
                names = {f.name for f in dataclasses.fields(sec)}
                unknown = set(value) - names
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                value = dict(value)
                for tup in ("phoneme_len_range", "fast_betas"):
                    if tup in value:
                        value[tup] = tuple(value[tup])
                kwargs[key] = sec(**value)
            elif key == "seed":
                kwargs["seed"] = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        except (OSError, tomllib.TOMLDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc

    def save(self, out_dir) -> None:
        """Write ``config.toml`` plus a ``config.json`` mirror."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(tomli_w.dumps(self.to_dict()))
        (out / "config.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x

"""Command-line harness: corpus, two-stage training, synthesis, sweeps, evaluation.

All stages share one run directory (``--out``)::

    data/      dataset manifest + blobs, schedule.csv
    vae/       vae and discriminator checkpoints, loss.csv
    ldm/       ldm checkpoint, loss.csv
    synth/     latents, decoded features, timing.json, trace.csv (--verbose)
    sweep/     grid.csv, summary.json
    eval/      report.json
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .aligner import AlignmentError
from .autodiff import load_checkpoint, save_checkpoint
from .blobio import BlobFormatError, write_blob_set
from .config import ConfigError, RunConfig
from .evaluate import (
    SpeakerCentroids, decode_latent, full_vs_fast, monotone_transitions, separation_ratio, sweep_cell,
    sweep_items,
)
from .ldm import GuidanceWeights, LatentDiffusion, SamplingError, train_ldm, write_trace_csv
from .pvae import N_FEAT_EXTRA, PhonemeVAE, encode_means, recon_l1, train_vae
from .schedules import dump_schedule_csv, fast_sampling_plan, linear_beta_schedule
from .selfcheck import run_selfcheck
from .synthdata import Dataset, PhonemeSeq, aligner_accuracy, gen_corpus, read_dataset, write_dataset

log = logging.getLogger("phonemeldm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 1, 2, 3


class UsageError(ValueError):
    """Bad inputs detected before any work starts (exit code 1)."""


# ---------------------------------------------------------------- shared plumbing

def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    elif (Path(args.out) / "config.toml").exists():
        cfg = RunConfig.load(Path(args.out) / "config.toml")
    else:
        cfg = RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    for flag, key in (("w_text", "w_text"), ("w_spk", "w_spk"), ("mode", "mode"), ("variance", "variance")):
        value = getattr(args, flag, None)
        if value is not None:
            d["sampler"][key] = value
    return RunConfig.from_dict(d)


def _schedule(cfg: RunConfig):
    s = cfg.schedule
    schedule = linear_beta_schedule(s.T, s.beta1, s.betaT)
    return schedule, fast_sampling_plan(s.fast_betas, schedule)


def _n_feat(ds: Dataset) -> int:
    return ds.params["d_ling"] + N_FEAT_EXTRA


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def load_data(out: Path) -> Dataset:
    _need(out / "data" / "dataset.json", "dataset (run gen-data first)")
    return read_dataset(out / "data")


def load_vae(cfg: RunConfig, ds: Dataset, out: Path) -> PhonemeVAE:
    vae = PhonemeVAE(cfg.vae, ds.params["vocab"], _n_feat(ds))
    load_checkpoint(vae, _need(out / "vae" / "vae.json", "VAE checkpoint (run train-vae first)").with_suffix(""))
    return vae


def load_ldm(cfg: RunConfig, ds: Dataset, out: Path) -> LatentDiffusion:
    model = LatentDiffusion(cfg.ldm, ds.params["vocab"], _n_feat(ds), cfg.vae.d_z, seed=cfg.seed)
    load_checkpoint(model, _need(out / "ldm" / "ldm.json", "LDM checkpoint (run train-ldm first)").with_suffix(""))
    return model


def write_rows(path: Path, rows: list[dict], fields) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def parse_phonemes(spec: str) -> PhonemeSeq:
    """Words separated by '|' or whitespace, phoneme ids by ','. Example: ``3,4|5,6,7``."""
    words = [w for w in spec.replace("|", " ").split() if w]
    try:
        groups = [[int(p) for p in w.split(",") if p] for w in words]
    except ValueError as exc:
        raise UsageError(f"bad phoneme spec {spec!r}") from exc
    ids, starts = [], []
    for g in groups:
        if not g:
            raise UsageError(f"empty word in {spec!r}")
        starts.append(len(ids))
        ids.extend(g)
    return PhonemeSeq(ids, starts)


def _utt(ds: Dataset, index: int, what: str):
    if not 0 <= index < len(ds.utterances):
        raise UsageError(f"{what} index {index} outside [0, {len(ds.utterances)})")
    return ds.utterances[index]


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    c = cfg.corpus
    ds = gen_corpus(cfg.seed, c.n_speakers, c.utts_per_speaker, c.phoneme_len_range, c.jitter,
                    c.vocab, c.d_ling, c.lexicon_size)
    write_dataset(ds, out / "data")
    schedule, _ = _schedule(cfg)
    dump_schedule_csv(schedule, out / "data" / "schedule.csv")
    cfg.save(out)
    return {"utterances": len(ds.utterances), "fingerprint": ds.fingerprint()}


def cmd_train_vae(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    ds = load_data(out)
    t0 = time.perf_counter()
    vae, disc, rows = train_vae(ds, cfg.vae, cfg.seed)
    seconds = time.perf_counter() - t0
    save_checkpoint(vae, out / "vae" / "vae", {"config_hash": cfg.hash()})
    save_checkpoint(disc, out / "vae" / "disc", {"config_hash": cfg.hash()})
    write_rows(out / "vae" / "loss.csv", rows, rows[0].keys() if rows else ["step"])
    write_json(out / "vae" / "timing.json", {"train_seconds": seconds})
    return {"steps": len(rows), "final_total": rows[-1]["total"] if rows else None}


def cmd_train_ldm(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    ds = load_data(out)
    vae = load_vae(cfg, ds, out)
    mus = encode_means(vae, ds)
    schedule, _ = _schedule(cfg)
    t0 = time.perf_counter()
    model, rows = train_ldm(ds, mus, cfg.ldm, schedule, cfg.seed, cfg.vae.d_z)
    seconds = time.perf_counter() - t0
    save_checkpoint(model, out / "ldm" / "ldm", {"config_hash": cfg.hash()})
    write_rows(out / "ldm" / "loss.csv", rows, ["step", "loss"])
    write_json(out / "ldm" / "timing.json", {"train_seconds": seconds})
    return {"steps": len(rows), "final_loss": rows[-1]["loss"] if rows else None}


def cmd_synth(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    ds = load_data(out)
    vae, model = load_vae(cfg, ds, out), load_ldm(cfg, ds, out)
    phonemes = parse_phonemes(args.phonemes) if args.phonemes else _utt(ds, args.text, "text").phonemes
    if np.any(phonemes.ids < 0) or np.any(phonemes.ids >= ds.params["vocab"]):
        raise UsageError(f"phoneme ids must lie in [0, {ds.params['vocab']})")
    ref = _utt(ds, args.ref, "reference")
    schedule, plan = _schedule(cfg)
    s = cfg.sampler
    w = GuidanceWeights(s.w_text, s.w_spk)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    trace = [] if args.verbose else None
    t0 = time.perf_counter()
    z = model.sample(phonemes, ref.features, w, schedule, s.mode, rng, plan=plan, trace=trace,
                     variance=s.variance)
    seconds = time.perf_counter() - t0
    decoded = decode_latent(vae, z)
    d = out / "synth"
    meta = {"phonemes": phonemes.ids.tolist(), "word_starts": phonemes.word_starts.tolist(),
            "ref_index": args.ref, "ref_speaker": ref.speaker, "w_text": w.w_text, "w_spk": w.w_spk,
            "mode": s.mode, "variance": s.variance, "config_hash": cfg.hash()}
    write_blob_set(d / "latents", {"latent": z}, meta)
    write_blob_set(d / "features", {"frames": decoded.frames.data,
                                    "durations": decoded.durations.astype(np.float32)}, meta)
    write_json(d / "timing.json", {"sample_seconds": seconds, "mode": s.mode,
                                   "steps": plan.steps if s.mode == "fast" else schedule.T})
    if trace is not None:
        write_trace_csv(trace, d / "trace.csv")
    return {"phonemes": len(phonemes), "frames": int(decoded.durations.sum()), "sample_seconds": seconds}


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc
    if not vals:
        raise UsageError("empty weight list")
    return vals


def cmd_sweep(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    ds = load_data(out)
    vae, model = load_vae(cfg, ds, out), load_ldm(cfg, ds, out)
    schedule, plan = _schedule(cfg)
    centroids = SpeakerCentroids.build(ds, encode_means(vae, ds))
    items = sweep_items(ds, args.items, cfg.seed)
    rows = []
    for wt in _floats(args.w_text_list):
        for ws in _floats(args.w_spk_list):
            rows.append(sweep_cell(vae, model, ds, centroids, items, GuidanceWeights(wt, ws), schedule,
                                   cfg.sampler.mode, plan, cfg.seed, cfg.sampler.variance))
            log.info("sweep w_text=%s w_spk=%s -> %.4f", wt, ws, rows[-1]["centroid_distance"])
    fields = ["w_text", "w_spk", "centroid_distance", "duration_mae", "wall_seconds"]
    write_rows(out / "sweep" / "grid.csv", rows, fields)
    ok, total = monotone_transitions(rows)
    summary = {"cells": len(rows), "non_increasing_spk_transitions": ok, "spk_transitions": total}
    write_json(out / "sweep" / "summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    ds = load_data(out)
    vae, model = load_vae(cfg, ds, out), load_ldm(cfg, ds, out)
    schedule, plan = _schedule(cfg)
    u, r = _utt(ds, args.text, "text"), _utt(ds, args.ref, "reference")
    w = GuidanceWeights(cfg.sampler.w_text, cfg.sampler.w_spk)
    report = {
        "recon_l1": recon_l1(vae, ds),
        "aligner_accuracy": aligner_accuracy(ds),
        "separation": separation_ratio(model, ds, n_pairs=50, seed=cfg.seed),
        "full_vs_fast": full_vs_fast(model, u.phonemes, r.features, w, schedule, plan, n=args.samples,
                                     seed=cfg.seed, variance=cfg.sampler.variance),
        "config_hash": cfg.hash(),
    }
    write_json(out / "eval" / "report.json", report)
    return {"recon_l1": report["recon_l1"], "separation_ratio": report["separation"]["ratio"],
            "max_gap": report["full_vs_fast"]["max_gap"],
            "mean_gap": report["full_vs_fast"]["mean_gap"]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train-ldm": cmd_train_ldm,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (default: <out>/config.toml, else built-in)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--w-text", type=float, dest="w_text", help="text guidance weight")
    common.add_argument("--w-spk", type=float, dest="w_spk", help="speaker guidance weight")
    common.add_argument("--mode", choices=["full", "fast"], help="sampler: 200-step full or 16-step fast")
    common.add_argument("--variance", choices=["beta", "posterior"],
                        help="reverse-step noise variance (default beta)")
    common.add_argument("--verbose", action="store_true", help="progress logging and sampler trace CSV")

    p = argparse.ArgumentParser(prog="phonemeldm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("train-vae", parents=[common], help="train the phoneme-level VAE")
    sub.add_parser("train-ldm", parents=[common], help="train the latent diffusion model")
    s = sub.add_parser("synth", parents=[common], help="sample a latent and decode it")
    s.add_argument("--text", type=int, default=0, help="corpus utterance supplying the phonemes")
    s.add_argument("--phonemes", help="explicit phonemes, e.g. '3,4|5,6,7' (overrides --text)")
    s.add_argument("--ref", type=int, default=1, help="corpus utterance used as speaker reference")
    s = sub.add_parser("sweep", parents=[common], help="grid over guidance weights")
    s.add_argument("--w-text-list", default="1,4")
    s.add_argument("--w-spk-list", default="1,4")
    s.add_argument("--items", type=int, default=8, help="text/reference pairs per grid cell")
    s = sub.add_parser("eval", parents=[common], help="metrics report")
    s.add_argument("--text", type=int, default=0)
    s.add_argument("--ref", type=int, default=1)
    s.add_argument("--samples", type=int, default=500, help="latents per sampler for full-vs-fast")
    sub.add_parser("selfcheck", parents=[common], help="gradient, MAS, schedule and guidance checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"config {cfg.hash()}")
    if args.command == "selfcheck":
        failed = 0
        for name, ok, detail in run_selfcheck():
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            failed += not ok
        return EXIT_SELFCHECK if failed else EXIT_OK
    try:
        summary = COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, BlobFormatError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SamplingError, AlignmentError, FloatingPointError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

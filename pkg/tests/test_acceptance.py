"""Acceptance gate. Each test prints one PASS/FAIL line with its measurement."""
import math
import time

import numpy as np
import tomli_w

from phonemeldm.aligner import mas
from phonemeldm.autodiff import Tensor, grad_check, grad_check_params, no_grad, precision
from phonemeldm.cli import main
from phonemeldm.config import LdmConfig
from phonemeldm.evaluate import separation_ratio
from phonemeldm.ldm import (
    GuidanceWeights, LatentDiffusion, condition_dropout_batch, dual_cfg, ldm_loss, sample_latent,
)
from phonemeldm.pvae import vae_step_loss
from phonemeldm.schedules import FAST_BETAS, fast_sampling_plan, linear_beta_schedule
from phonemeldm.synthdata import aligner_accuracy, gen_corpus

from test_aligner import brute_force
from test_autodiff import PRIMITIVES, SCALAR_PRIMITIVES, _weighted
from test_pvae import TINY as TINY_VAE, _tiny64


def _gate(report, n: int, ok: bool, detail: str) -> None:
    report(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def test_01_gradient_suite(report):
    t0 = time.perf_counter()
    prim = 0.0
    for fn, make in PRIMITIVES.values():
        for seed in range(3):
            rng = np.random.default_rng(seed)
            point = make(rng)
            with precision(np.float64), no_grad():
                shape = fn(*[Tensor(x) for x in point]).shape
            prim = max(prim, grad_check(_weighted(fn, rng.normal(size=shape)), point))
    for fn, make in SCALAR_PRIMITIVES.values():
        for seed in range(3):
            prim = max(prim, grad_check(fn, make(np.random.default_rng(seed))))

    ds = gen_corpus(5, 2, 2, phoneme_len_range=(3, 5))
    u, ref = ds.utterances[0], ds.utterances[1]
    vae, disc = _tiny64(seed=2)
    noise = np.random.default_rng(0).standard_normal((len(u.phonemes), TINY_VAE.d_z))
    tiny_ldm = LdmConfig(d_model=8, heads=2, layers=1, d_c=4, cond_heads=2, cond_layers=1, prototypes=5)
    sched = linear_beta_schedule()
    with precision(np.float64):
        comp = grad_check_params(lambda: vae_step_loss(vae, disc, u, noise, TINY_VAE)[0], vae.parameters(),
                                 max_per_tensor=3)
        comp = max(comp, grad_check_params(lambda: vae_step_loss(vae, disc, u, noise, TINY_VAE)[1],
                                           disc.parameters(), max_per_tensor=3))
        model = LatentDiffusion(tiny_ldm, 64, ref.features.stacked().shape[1], 3, seed=0)
        mu = np.random.default_rng(0).normal(size=(len(u.phonemes), 3))

        def ldm_objective():
            conds = model.conditions(u.phonemes, ref.features)
            return ldm_loss(model.denoiser, mu, conds, sched, np.random.default_rng(3), tiny_ldm)[0]

        comp = max(comp, grad_check_params(ldm_objective, model.parameters(), max_per_tensor=2))
    seconds = time.perf_counter() - t0
    _gate(report, 1, prim < 1e-4 and comp < 1e-3 and seconds < 60,
          f"primitives {prim:.2e} (<1e-4), composites {comp:.2e} (<1e-3), {seconds:.1f}s (<60s)")


def test_02_schedule_oracle(report):
    s = linear_beta_schedule(200, 1e-4, 0.03)
    worst, prod = 0.0, 1.0
    for t in range(1, 201):
        prod *= 1.0 - (1e-4 + (0.03 - 1e-4) * (t - 1) / 199)
        worst = max(worst, abs(s.alpha_bar[t] - prod) / prod)
    exact = s.beta[1] == 1e-4 and s.beta[200] == 0.03
    decreasing = bool(np.all(np.diff(s.alpha_bar) < 0))
    _gate(report, 2, exact and worst < 1e-12 and decreasing,
          f"beta endpoints exact={exact}, alpha_bar rel err {worst:.1e} (<1e-12), decreasing={decreasing}")


def test_03_mas_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    for shape in [(3, 5), (4, 6)]:
        for _ in range(100):
            ll = rng.normal(size=shape)
            bad += int(not np.array_equal(mas(ll), brute_force(ll)))
    seconds = time.perf_counter() - t0
    _gate(report, 3, bad == 0 and seconds < 10, f"{bad} mismatches over 200 matrices, {seconds:.2f}s (<10s)")


def test_04_dual_cfg_identities(report):
    rng = np.random.default_rng(0)
    full, spk, text, null = (rng.integers(-64, 64, size=(4, 3)) / 8.0 for _ in range(4))
    zero = dual_cfg(full, spk, text, null, GuidanceWeights(0, 0)).tobytes() == full.tobytes()
    collapse = all(np.array_equal(dual_cfg(full, full, full, full, GuidanceWeights(a, b)), full)
                   for a, b in [(1, 1), (3.5, 0.25), (0, 5)])
    base = dual_cfg(full, spk, text, null, GuidanceWeights(1.0, 0.5))
    affine = (np.array_equal(dual_cfg(full, spk, text, null, GuidanceWeights(1.5, 0.5)) - base, 0.5 * (text - null))
              and np.array_equal(dual_cfg(full, spk, text, null, GuidanceWeights(1.0, 2.5)) - base,
                                 2.0 * (spk - null)))
    scalar = float(dual_cfg(1.0, 0.8, 0.6, 0.5, GuidanceWeights(w_text=3, w_spk=2)))
    scalar_ok = math.isclose(scalar, 1.9, rel_tol=0, abs_tol=4 * np.finfo(float).eps)
    _gate(report, 4, zero and collapse and affine and scalar_ok,
          f"zero-weight={zero}, collapse={collapse}, affine={affine}, scalar={scalar!r}")


def test_05_dropout_rates(report):
    text, spk = condition_dropout_batch(np.random.default_rng(0), 1_000_000)
    p_text, p_both = float(text.mean()), float((text & spk).mean())
    ok = abs(p_text - 0.145) <= 0.002 and abs(p_both - 0.1045) <= 0.002
    _gate(report, 5, ok, f"P(null_text)={p_text:.4f} (0.145), P(both)={p_both:.4f} (0.1045), tol 0.002")


def test_06_gaussian_sampler_oracle(report):
    m, s, n = 0.5, 0.8, 2000
    sched = linear_beta_schedule()
    plan = fast_sampling_plan(FAST_BETAS, sched)

    def optimal_eps(z, t, null_text, null_spk):
        ab = sched.sqrt_alpha_bar_at(t) ** 2
        return np.sqrt(1 - ab) * (z - np.sqrt(ab) * m) / (ab * s * s + 1 - ab)

    t0 = time.perf_counter()
    parts, ok = [], True
    for mode in ("full", "fast"):
        z = sample_latent(optimal_eps, (n, 1), GuidanceWeights(0, 0), sched, mode, np.random.default_rng(0), plan)
        mean_err, var_ratio = abs(z.mean() - m), z.var() / s**2
        ok &= mean_err < 3 * s / math.sqrt(n) and abs(var_ratio - 1) < 0.10
        parts.append(f"{mode}: |mean-m|={mean_err:.4f} (<{3 * s / math.sqrt(n):.4f}) var/s^2={var_ratio:.3f}")
    seconds = time.perf_counter() - t0
    _gate(report, 6, ok and seconds < 120, "; ".join(parts) + f"; {seconds:.1f}s (<120s)")


def test_07_training_smoke(report, trained_toy):
    vae_loss = {r["step"]: r["total"] for r in trained_toy.vae_rows}
    ldm_loss_ = np.array([r["loss"] for r in trained_toy.ldm_rows])
    vae_ratio = vae_loss[500] / vae_loss[10]
    ldm_ratio = ldm_loss_[999] / ldm_loss_[:20].mean()
    ok = vae_ratio < 0.5 and ldm_ratio < 0.8 and trained_toy.seconds < 900
    _gate(report, 7, ok, f"VAE step500/step10={vae_ratio:.3f} (<0.5), LDM step1000/mean(1..20)={ldm_ratio:.3f} "
                         f"(<0.8), wall {trained_toy.seconds:.0f}s (<900s)")


def test_08_pipeline_determinism(report, tmp_path):
    cfg = {
        "seed": 11,
        "corpus": {"n_speakers": 3, "utts_per_speaker": 4},
        "vae": {"d_model": 16, "heads": 2, "layers": 1, "steps": 20},
        "ldm": {"d_model": 16, "heads": 2, "layers": 1, "d_c": 8, "cond_heads": 2, "cond_layers": 1,
                "prototypes": 12, "steps": 20},
    }
    path = tmp_path / "cfg.toml"
    path.write_text(tomli_w.dumps(cfg))
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        for cmd in (["gen-data"], ["train-vae"], ["train-ldm"], ["synth", "--text", "2", "--ref", "5"]):
            assert main(cmd + ["--config", str(path), "--out", str(out)]) == 0
        files = sorted((out / "synth").glob("latents.*"))
        blobs.append({p.relative_to(out).as_posix(): p.read_bytes() for p in files})
    same = bool(blobs[0]) and blobs[0] == blobs[1]
    _gate(report, 8, same, f"{len(blobs[0])} latent blob files byte-identical across two runs: {same}")


def test_09_aligner_recovery(report):
    acc = aligner_accuracy(gen_corpus(0, 8, 20, jitter=0.05))
    _gate(report, 9, acc >= 0.95, f"exact duration recovery {acc:.4f} (>=0.95) at jitter 0.05")


def test_10_conditioner_separation(report, trained_toy):
    res = separation_ratio(trained_toy.model, trained_toy.ds, n_pairs=50, seed=0)
    ok = res["same"] < res["different"] and res["ratio"] < 0.9
    _gate(report, 10, ok, f"same {res['same']:.4f}, different {res['different']:.4f}, "
                          f"ratio {res['ratio']:.3f} (<0.9) over 50 pairs")

"""Linear variance schedule, forward noising, ancestral reverse step, fast-sampling plan."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# 16-step inference schedule used for fast sampling
FAST_BETAS = (1e-4, 5e-4, 1e-3, 5e-3, 0.01, 0.02, 0.05, 0.2, 0.3, 0.5, 0.4, 0.3, 0.3, 0.2, 0.1, 0.1)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Tables are 1-indexed through padding: ``beta[0]`` is unused, ``alpha_bar[0] == 1``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t: int) -> int:
        if not 1 <= int(t) <= self.T or int(t) != t:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return int(t)

    def sqrt_alpha_bar_at(self, t: float) -> float:
        """sqrt(alpha_bar) at continuous t in [0, T], linear between integer steps."""
        if not 0.0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        s = np.sqrt(self.alpha_bar)
        lo = int(np.floor(t))
        if lo == self.T:
            return float(s[-1])
        frac = t - lo
        return float(s[lo] + frac * (s[lo + 1] - s[lo]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "beta", "alpha", "alpha_bar"])
            for i in range(1, self.T + 1):
                w.writerow([i, repr(float(self.beta[i])), repr(float(self.alpha[i])),
                            repr(float(self.alpha_bar[i]))])


def linear_beta_schedule(T: int = 200, beta1: float = 1e-4, betaT: float = 0.03) -> DiffusionSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta1 < betaT < 1.0:
        raise ValueError("need 0 < beta1 < betaT < 1")
    i = np.arange(1, T + 1, dtype=np.float64)
    beta = beta1 + (betaT - beta1) * (i - 1) / (T - 1)
    beta[-1] = betaT  # exact endpoint, immune to rounding in the closed form
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(
        T=T,
        beta=np.concatenate([[0.0], beta]),
        alpha=np.concatenate([[1.0], alpha]),
        alpha_bar=np.concatenate([[1.0], alpha_bar]),
    )


def forward_diffuse(mu: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) mu + sqrt(1 - abar_t) eps. t = 0 returns mu."""
    mu, eps = np.asarray(mu), np.asarray(eps)
    if mu.shape != eps.shape:
        raise ValueError(f"shape mismatch {mu.shape} vs {eps.shape}")
    if int(t) != t or not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[int(t)]
    if ab == 1.0:
        return mu.copy()
    return (np.sqrt(ab) * mu + np.sqrt(1.0 - ab) * eps).astype(mu.dtype, copy=False)


REVERSE_VARIANCES = ("beta", "posterior")


def reverse_update(z, eps_hat, beta: float, gamma: float, gamma_prev: float, xi=None, variance: str = "beta"):
    """One reverse step given noise level gamma and previous level gamma_prev.

    ``variance`` picks the noise term: "beta" uses beta (matched to near unit-Gaussian
    data, and the choice that keeps the coarse 16-step plan calibrated), "posterior"
    uses beta * (1 - gamma_prev) / (1 - gamma). Noise is skipped when ``xi`` is None.
    """
    if variance not in REVERSE_VARIANCES:
        raise ValueError(f"variance must be one of {REVERSE_VARIANCES}")
    z = np.asarray(z)
    mean = (z - (beta / np.sqrt(1.0 - gamma)) * np.asarray(eps_hat)) / np.sqrt(1.0 - beta)
    if xi is None:
        return mean.astype(z.dtype, copy=False)
    var = beta if variance == "beta" else beta * (1.0 - gamma_prev) / (1.0 - gamma)
    return (mean + np.sqrt(var) * np.asarray(xi)).astype(z.dtype, copy=False)


def ancestral_step(z_t, eps_hat, t: int, schedule: DiffusionSchedule, xi=None, variance: str = "beta"):
    """z_{t-1} from z_t; the noise draw ``xi`` is ignored at t = 1."""
    t = schedule.check_t(t)
    return reverse_update(z_t, eps_hat, schedule.beta[t], schedule.alpha_bar[t],
                          schedule.alpha_bar[t - 1], None if t == 1 else xi, variance)


@dataclass(frozen=True)
class FastPlan:
    """Reverse-pass plan. Index s = 1..S; arrays are padded so ``gamma[0] == 1``."""

    user_beta: np.ndarray
    gamma: np.ndarray
    mapped_t: np.ndarray
    warnings: tuple[str, ...] = field(default=())

    @property
    def steps(self) -> int:
        return len(self.user_beta) - 1


def fast_sampling_plan(user_beta, schedule: DiffusionSchedule) -> FastPlan:
    """Map each user noise level onto fractional training time by locating
    sqrt(gamma_s) between consecutive sqrt(alpha_bar) values."""
    ub = np.asarray(user_beta, dtype=np.float64)
    if ub.ndim != 1 or ub.size == 0 or np.any(ub <= 0) or np.any(ub >= 1):
        raise ValueError("user betas must be a non-empty list of values in (0, 1)")
    gamma = np.cumprod(1.0 - ub)
    sab = np.sqrt(schedule.alpha_bar)
    warnings: list[str] = []
    mapped = np.empty_like(gamma)
    for s, g in enumerate(gamma):
        if g > 1.0 or g < schedule.alpha_bar[-1]:
            msg = f"step {s + 1}: gamma={g:.6g} outside [{schedule.alpha_bar[-1]:.6g}, 1], clamped"
            log.warning(msg)
            warnings.append(msg)
            g = min(max(g, schedule.alpha_bar[-1]), 1.0)
        sg = np.sqrt(g)
        for t in range(schedule.T):
            if sab[t + 1] <= sg <= sab[t]:
                mapped[s] = t + (sab[t] - sg) / (sab[t] - sab[t + 1])
                break
    return FastPlan(
        user_beta=np.concatenate([[0.0], ub]),
        gamma=np.concatenate([[1.0], gamma]),
        mapped_t=np.concatenate([[0.0], mapped]),
        warnings=tuple(warnings),
    )


def fast_step(z_s, eps_hat, s: int, plan: FastPlan, xi=None, variance: str = "beta"):
    if not 1 <= s <= plan.steps:
        raise ValueError(f"step {s} outside [1, {plan.steps}]")
    return reverse_update(z_s, eps_hat, plan.user_beta[s], plan.gamma[s], plan.gamma[s - 1],
                          None if s == 1 else xi, variance)


def dump_schedule_csv(schedule: DiffusionSchedule, path) -> Path:
    schedule.to_csv(path)
    return Path(path)

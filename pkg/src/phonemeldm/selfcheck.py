"""Fast internal gate: gradient checks, MAS against exhaustive search, schedule
against a direct product, and the guidance identities."""
from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from .aligner import mas, path_from_durations, path_score
from .autodiff import grad_check
from .autodiff import tensor as T
from .ldm import GuidanceWeights, condition_dropout_batch, dual_cfg
from .schedules import FAST_BETAS, fast_sampling_plan, linear_beta_schedule

_GRAD_CASES: dict[str, tuple[Callable, list[tuple[int, ...]]]] = {
    "matmul": (T.matmul, [(3, 4), (4, 2)]),
    "softmax": (T.softmax, [(2, 5)]),
    "layer_norm": (T.layer_norm, [(3, 6)]),
    "gelu": (T.gelu, [(4, 3)]),
    "exp_log": (lambda a: T.log(T.exp(a) + 1.0), [(3, 3)]),
    "attention": (lambda q, k, v: T.attention(q, k, v), [(3, 4), (5, 4), (5, 4)]),
    "mse": (T.mse_loss, [(4,), (4,)]),
}


def check_gradients(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, (fn, shapes) in _GRAD_CASES.items():
        point = [rng.normal(size=s) for s in shapes]
        weights = None

        def scalar(*xs, fn=fn):
            nonlocal weights
            out = fn(*xs)
            if weights is None:
                weights = rng.normal(size=out.shape)
            return T.sum_(out * T.Tensor(weights, dtype=np.float64))

        worst = max(worst, grad_check(scalar, point))
    return bool(worst < 1e-4), f"max relative error {worst:.2e}"


def _brute_force(ll: np.ndarray) -> np.ndarray:
    P, F = ll.shape
    best, best_path = -np.inf, None
    for cuts in itertools.combinations(range(1, F), P - 1):
        bounds = (0,) + cuts + (F,)
        path = path_from_durations([bounds[i + 1] - bounds[i] for i in range(P)])
        s = path_score(ll, path)
        if s > best:
            best, best_path = s, path
    return best_path


def check_mas(n: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    bad = 0
    for shape in [(3, 5), (4, 6)]:
        for _ in range(n):
            ll = rng.normal(size=shape)
            bad += int(not np.array_equal(mas(ll), _brute_force(ll)))
    return bad == 0, f"{bad} mismatches over {2 * n} matrices"


def check_schedule() -> tuple[bool, str]:
    s = linear_beta_schedule(200, 1e-4, 0.03)
    prod, worst = 1.0, 0.0
    for i in range(1, 201):
        prod *= 1.0 - (1e-4 + (0.03 - 1e-4) * (i - 1) / 199)
        worst = max(worst, abs(s.alpha_bar[i] - prod) / prod)
    ok = (s.beta[1] == 1e-4 and s.beta[200] == 0.03 and worst < 1e-12
          and bool(np.all(np.diff(s.alpha_bar) < 0)))
    plan = fast_sampling_plan(FAST_BETAS, s)
    ok = ok and plan.steps == 16 and bool(np.all(np.diff(plan.mapped_t[1:]) > 0))
    return ok, f"alpha_bar max relative error {worst:.1e}"


def check_guidance() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    e = [rng.integers(-32, 32, size=(3, 2)) / 8.0 for _ in range(4)]
    ok = dual_cfg(*e, GuidanceWeights(0, 0)).tobytes() == e[0].tobytes()
    ok &= bool(np.array_equal(dual_cfg(e[1], e[1], e[1], e[1], GuidanceWeights(2, 3)), e[1]))
    ok &= math.isclose(float(dual_cfg(1.0, 0.8, 0.6, 0.5, GuidanceWeights(3, 2))), 1.9, abs_tol=1e-15)
    d = dual_cfg(*e, GuidanceWeights(1.5, 1)) - dual_cfg(*e, GuidanceWeights(1, 1))
    ok &= bool(np.array_equal(d, 0.5 * (e[2] - e[3])))
    t, s = condition_dropout_batch(np.random.default_rng(0), 200_000)
    ok &= abs(t.mean() - 0.145) < 0.004 and abs((t & s).mean() - 0.1045) < 0.004
    return bool(ok), "dual guidance identities and dropout rates"


CHECKS = {
    "gradients": check_gradients,
    "mas": check_mas,
    "schedule": check_schedule,
    "guidance": check_guidance,
}


def run_selfcheck() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported with its message
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results

"""Monotonic alignment search over a phoneme x frame log-likelihood matrix."""
from __future__ import annotations

import csv

import numpy as np


class AlignmentError(ValueError):
    pass


def likelihood_matrix(means: np.ndarray, variances: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log-density of each frame under each phoneme, shape (P, F).

    means, variances: (P, d); frames: (F, d) linguistic vectors.
    """
    means = np.asarray(means, dtype=np.float64)
    var = np.broadcast_to(np.asarray(variances, dtype=np.float64), means.shape)
    x = np.asarray(frames, dtype=np.float64)
    P, F = means.shape[0], x.shape[0]
    if P < 1:
        raise AlignmentError("need at least one phoneme")
    if F < P:
        raise AlignmentError(f"{F} frames cannot cover {P} phonemes")
    if np.any(var <= 0):
        raise AlignmentError("variances must be positive")
    d = means.shape[1]
    const = -0.5 * (d * np.log(2 * np.pi) + np.log(var).sum(axis=1))  # (P,)
    diff = x[None, :, :] - means[:, None, :]
    return const[:, None] - 0.5 * (diff * diff / var[:, None, :]).sum(axis=2)


def mas(loglik: np.ndarray) -> np.ndarray:
    """Best monotonic path, as a {0,1} matrix (P, F) with one 1 per column.

    Q(p, f) = loglik(p, f) + max(Q(p, f-1), Q(p-1, f-1)); ties stay on the current phoneme.
    """
    ll = np.asarray(loglik, dtype=np.float64)
    P, F = ll.shape
    if F < P:
        raise AlignmentError(f"{F} frames cannot cover {P} phonemes")
    Q = np.full((P, F), -np.inf)
    Q[0, 0] = ll[0, 0]
    for f in range(1, F):
        stay = Q[:, f - 1]
        move = np.concatenate([[-np.inf], Q[:-1, f - 1]])
        Q[:, f] = ll[:, f] + np.maximum(stay, move)
    path = np.zeros((P, F), dtype=np.int8)
    p = P - 1
    for f in range(F - 1, -1, -1):
        path[p, f] = 1
        if f > 0 and p > 0 and (p == f or Q[p - 1, f - 1] > Q[p, f - 1]):
            p -= 1
    return path


def path_score(loglik: np.ndarray, path: np.ndarray) -> float:
    return float((np.asarray(loglik, dtype=np.float64) * path).sum())


def validate_path(path: np.ndarray) -> None:
    path = np.asarray(path)
    P, F = path.shape
    if not np.isin(path, (0, 1)).all() or not np.all(path.sum(axis=0) == 1):
        raise AlignmentError("each frame must belong to exactly one phoneme")
    owner = path.argmax(axis=0)
    if owner[0] != 0 or owner[-1] != P - 1 or np.any(np.diff(owner) < 0) or np.any(np.diff(owner) > 1):
        raise AlignmentError("path is not monotonic and surjective")


def durations_from_path(path: np.ndarray) -> np.ndarray:
    validate_path(path)
    return np.asarray(path).sum(axis=1).astype(np.int64)


def path_from_durations(durations) -> np.ndarray:
    d = np.asarray(durations, dtype=np.int64)
    path = np.zeros((d.size, int(d.sum())), dtype=np.int8)
    path[np.repeat(np.arange(d.size), d), np.arange(int(d.sum()))] = 1
    return path


def align(means, variances, frames) -> np.ndarray:
    """Durations for one utterance."""
    return durations_from_path(mas(likelihood_matrix(means, variances, frames)))


def write_durations_csv(path, rows) -> None:
    """rows: iterable of (utterance_id, durations)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "phoneme_index", "frames"])
        for utt_id, durs in rows:
            for i, d in enumerate(durs):
                w.writerow([utt_id, i, int(d)])

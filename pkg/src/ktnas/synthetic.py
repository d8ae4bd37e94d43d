"""Synthetic interaction logs with known generating processes."""
from __future__ import annotations

import numpy as np

from .data import InteractionRecord


def _noise_modalities(rng: np.random.Generator):
    return float(rng.lognormal(3.0, 1.0)), int(rng.integers(0, 8)), int(rng.integers(0, 6))


def bkt_log(n_students: int = 200, n_skills: int = 5, length: int = 50, p_init: float = 0.2,
            p_learn: float = 0.2, p_guess: float = 0.2, p_slip: float = 0.1, seed: int = 0,
            shuffle_labels: bool = False) -> list[InteractionRecord]:
    """Bayesian-knowledge-tracing students: per-skill mastery with learn/guess/slip.

    Each attempt practises a uniformly drawn skill. Time spent, attempts and
    hints are independent noise; first action is always an attempt.
    ``shuffle_labels`` permutes responses across the whole log, destroying the
    sequential signal while keeping the base rate.
    """
    rng = np.random.default_rng(seed)
    recs = []
    for s in range(n_students):
        mastered = rng.random(n_skills) < p_init
        for t in range(length):
            k = int(rng.integers(n_skills))
            p = 1 - p_slip if mastered[k] else p_guess
            resp = int(rng.random() < p)
            if not mastered[k] and rng.random() < p_learn:
                mastered[k] = True
            ts, att, hints = _noise_modalities(rng)
            recs.append(InteractionRecord(f"s{s:04d}", k, resp, ts, att, hints, 1, t))
    if shuffle_labels:
        labels = rng.permutation([r.response for r in recs])
        recs = [InteractionRecord(r.student_id, r.skill_id, int(y), r.time_spent, r.attempts, r.hints,
                                  r.first_action, r.order) for r, y in zip(recs, labels)]
    return recs


def planted_log(n_students: int = 120, n_skills: int = 4, length: int = 30, seed: int = 0,
                p_learn: float = 0.1, hint_unmastered: float = 0.4, hint_mastered: float = 0.05,
                p_guess: float = 0.2, p_slip: float = 0.1) -> list[InteractionRecord]:
    """Log whose outcomes depend only on latent mastery, seen through response and first action.

    Each student has an ability drawn uniformly from [0, 1] that sets the
    initial mastery probability of every skill, so early responses reveal the
    student. Unmastered students request hints more often (first action 0,
    response forced to 0). Time spent, attempts and hints are pure noise.
    """
    rng = np.random.default_rng(seed)
    recs = []
    for s in range(n_students):
        ability = rng.random()
        mastered = rng.random(n_skills) < ability
        for t in range(length):
            k = int(rng.integers(n_skills))
            hint = rng.random() < (hint_mastered if mastered[k] else hint_unmastered)
            if hint:
                first_action, resp = 0, 0
            else:
                first_action = 1
                resp = int(rng.random() < (1 - p_slip if mastered[k] else p_guess))
            if not mastered[k] and rng.random() < p_learn:
                mastered[k] = True
            ts, att, hints = _noise_modalities(rng)
            recs.append(InteractionRecord(f"p{s:04d}", k, resp, ts, att, hints, first_action, t))
    return recs

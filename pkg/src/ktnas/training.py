"""Mini-batch training and evaluation shared by every model kind."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .cells import KTModel, StepInputs
from .data import MODALITIES, NormalizationStats, StudentSequence, encode_columns
from .metrics import PredictionTrace

log = logging.getLogger(__name__)


@dataclass
class EncodedSequence:
    student_id: str
    skills: np.ndarray
    responses: np.ndarray
    visits: np.ndarray
    modalities: dict[str, np.ndarray]

    def __len__(self):
        return len(self.skills)


def encode_sequences(seqs: Sequence[StudentSequence], stats: NormalizationStats) -> list[EncodedSequence]:
    out = []
    for s in seqs:
        cols = encode_columns(list(s.records), stats)
        out.append(EncodedSequence(s.student_id, s.skills, s.responses,
                                   np.asarray(s.visits, dtype=np.float64), cols))
    return out


@dataclass
class Batch:
    students: list[str]
    skills: np.ndarray        # (B, T)
    responses: np.ndarray     # (B, T)
    visits: np.ndarray        # (B, T)
    mask: np.ndarray          # (B, T) 1 where a real attempt exists
    modalities: dict[str, np.ndarray]  # name -> (B, T, d)

    @property
    def length(self) -> int:
        return self.skills.shape[1]

    def step(self, t: int) -> StepInputs:
        return StepInputs(self.skills[:, t], self.responses[:, t],
                          {m: v[:, t, :] for m, v in self.modalities.items()})


def make_batch(seqs: Sequence[EncodedSequence]) -> Batch:
    B, T = len(seqs), max(len(s) for s in seqs)
    skills = np.zeros((B, T), dtype=np.int64)
    responses = np.zeros((B, T), dtype=np.int64)
    visits = np.ones((B, T))
    mask = np.zeros((B, T))
    mods = {m: np.zeros((B, T, seqs[0].modalities[m].shape[1])) for m in seqs[0].modalities}
    for i, s in enumerate(seqs):
        n = len(s)
        skills[i, :n], responses[i, :n], visits[i, :n], mask[i, :n] = s.skills, s.responses, s.visits, 1.0
        for m in mods:
            mods[m][i, :n] = s.modalities[m]
    return Batch([s.student_id for s in seqs], skills, responses, visits, mask, mods)


def batches(seqs: Sequence[EncodedSequence], batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(seqs)) if rng is None else rng.permutation(len(seqs))
    for i in range(0, len(seqs), batch_size):
        yield make_batch([seqs[j] for j in order[i:i + batch_size]])


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-2
    weight_decay: float = 0.0
    eps: float = 1e-8
    batch_size: int = 32
    clip: float | None = 5.0
    seed: int = 0


def sequence_loss(model: KTModel, batch: Batch) -> tuple[nc.Tensor, float]:
    """Summed next-attempt cross-entropy over a batch and the number of scored attempts."""
    state = model.initial_state(len(batch.students))
    total = None
    count = 0.0
    for t in range(batch.length - 1):
        m = batch.mask[:, t + 1]
        if not m.any():
            break
        state = model.step(batch.step(t), state)
        logits = model.predict(state, batch.skills[:, t + 1])
        term = nc.sigmoid_bce_with_logits(logits, batch.responses[:, t + 1], m)
        total = term if total is None else total + term
        count += float(m.sum())
    return total, count


def _clip(params, max_norm: float):
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale


def train(model: KTModel, seqs: Sequence[EncodedSequence], cfg: TrainConfig,
          optimizer: nc.Adam | None = None, rng: np.random.Generator | None = None) -> list[float]:
    """Train in place; returns mean loss per epoch."""
    optimizer = optimizer or nc.Adam(lr=cfg.lr, eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng = rng or np.random.default_rng(cfg.seed)
    params = model.parameters()
    history = []
    for epoch in range(cfg.epochs):
        tot, cnt = 0.0, 0.0
        for batch in batches(seqs, cfg.batch_size, rng):
            loss, count = sequence_loss(model, batch)
            if loss is None or count == 0:
                continue
            loss = loss * (1.0 / count)
            nc.Adam.zero_grad(params)
            nc.backward(loss)
            if cfg.clip:
                _clip(params, cfg.clip)
            optimizer.step(params)
            tot += loss.item() * count
            cnt += count
        history.append(tot / max(cnt, 1.0))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    nc.Adam.zero_grad(params)
    return history


def predict(model: KTModel, seqs: Sequence[EncodedSequence], batch_size: int = 64) -> PredictionTrace:
    """Score every attempt after the first of each sequence, in sequence order.

    Weights are the per-student skill visit counts of the predicted attempt.
    """
    students, skills, probs, labels, weights = [], [], [], [], []
    with nc.no_grad():
        for batch in batches(seqs, batch_size):
            B = len(batch.students)
            state = model.initial_state(B)
            p = np.zeros((B, batch.length))
            for t in range(batch.length - 1):
                if not batch.mask[:, t + 1].any():
                    break
                state = model.step(batch.step(t), state)
                p[:, t + 1] = nc.logistic(model.predict(state, batch.skills[:, t + 1]).data)
            for i in range(B):
                n = int(batch.mask[i].sum())
                students += [batch.students[i]] * (n - 1)
                skills.append(batch.skills[i, 1:n])
                probs.append(p[i, 1:n])
                labels.append(batch.responses[i, 1:n])
                weights.append(batch.visits[i, 1:n])
    if not probs:
        return PredictionTrace()
    return PredictionTrace(students, np.concatenate(skills), np.concatenate(probs),
                           np.concatenate(labels), np.concatenate(weights))

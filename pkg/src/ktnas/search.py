"""Progressive sequential model-based architecture search with shared weights.

The loop starts from the simplest candidates (one node, or one modality),
trains all of them, and fits a recurrent surrogate on (encoding, validation
AUC). Each further depth extends the best prefixes by one element; when the
frontier is larger than ``k`` the surrogate scores it and ``k`` candidates
are drawn with probability proportional to ``exp(score / temperature)``.
All candidates train against one weight store that is never re-initialised.
"""
from __future__ import annotations

import copy
import json
import logging
import os
import pickle
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import numcore as nc
from .cells import CellArchitecture, LSTMCell, SharedParameterStore
from .data import MODALITIES
from .fusion import FusionPlan, MultimodalArchitecture, _fused
from .metrics import UndefinedMetricError, auc
from .models import build_store, model_for_encoding, parse_encoding, space_of
from .numcore import ACTIVATIONS, ConfigurationError
from .training import EncodedSequence, TrainConfig, predict, train

log = logging.getLogger(__name__)

# token vocabulary shared by all encodings
MAX_NODES = 16
MODALITY_TOKENS = {m: MAX_NODES + i for i, m in enumerate(MODALITIES)}
ACTIVATION_TOKENS = {a: MAX_NODES + len(MODALITIES) + i for i, a in enumerate(ACTIVATIONS)}
_FUSED_BASE = MAX_NODES + len(MODALITIES) + len(ACTIVATIONS)
N_TOKENS = _FUSED_BASE + len(MODALITIES)
TANH, SIGMOID, RELU, IDENTITY = (ACTIVATION_TOKENS[a] for a in ("tanh", "sigmoid", "relu", "identity"))
_TOKEN_NAMES = {v: k for k, v in {**MODALITY_TOKENS, **ACTIVATION_TOKENS}.items()}


def _operand_token(op) -> int:
    if isinstance(op, str):
        if op in MODALITY_TOKENS:
            return MODALITY_TOKENS[op]
        if op.startswith("fused_"):
            return _FUSED_BASE + int(op[6:])
        raise ValueError(f"unknown operand {op!r}")
    if not 0 <= op < MAX_NODES:
        raise ValueError(f"node index {op} outside the token range")
    return int(op)


def _operand_of(tok: int):
    if tok < MAX_NODES:
        return tok
    if tok >= _FUSED_BASE:
        return _fused(tok - _FUSED_BASE)
    return _TOKEN_NAMES[tok]


def tokenize(encoding) -> list[int]:
    """Flatten an encoding to integer tokens (operand, activation, ...)."""
    if isinstance(encoding, FusionPlan):
        if not encoding.steps:
            return [MODALITY_TOKENS[encoding.base]]
        return [t for l, r, a in encoding.steps
                for t in (_operand_token(l), _operand_token(r), ACTIVATION_TOKENS[a])]
    return [t for p, a in encoding.pairs for t in (_operand_token(p), ACTIVATION_TOKENS[a])]


def detokenize(tokens: Sequence[int], space: str):
    tokens = list(tokens)
    if space == "fusion":
        if len(tokens) == 1:
            return FusionPlan((), _operand_of(tokens[0]))
        return FusionPlan(tuple((_operand_of(tokens[i]), _operand_of(tokens[i + 1]), _TOKEN_NAMES[tokens[i + 2]])
                                for i in range(0, len(tokens), 3)))
    pairs = tuple((_operand_of(tokens[i]), _TOKEN_NAMES[tokens[i + 1]]) for i in range(0, len(tokens), 2))
    if space == "cell":
        return CellArchitecture(pairs)
    if space == "multimodal":
        return MultimodalArchitecture(pairs)
    raise ConfigurationError(f"unknown search space {space!r}")


def encoding_modalities(encoding) -> set[str]:
    if isinstance(encoding, CellArchitecture):
        return {"response"}
    return set(encoding.modalities)


# search space enumeration

def initial_candidates(space: str, activations=ACTIVATIONS, modalities=MODALITIES) -> list:
    if space == "cell":
        return [CellArchitecture(((0, a),)) for a in activations]
    if space == "multimodal":
        return [MultimodalArchitecture(((m, a),)) for m in modalities for a in activations]
    if space == "fusion":
        return [FusionPlan((), m) for m in modalities]
    raise ConfigurationError(f"unknown search space {space!r}")


def extend(encoding, activations=ACTIVATIONS, modalities=MODALITIES) -> list:
    """Every one-element extension of ``encoding``."""
    if isinstance(encoding, CellArchitecture):
        d = len(encoding) + 1
        return [CellArchitecture(encoding.pairs + ((p, a),)) for p in range(d) for a in activations]
    if isinstance(encoding, MultimodalArchitecture):
        d = len(encoding) + 1
        used = set(encoding.modalities)
        preds = [m for m in modalities if m not in used] + list(range(d))
        return [MultimodalArchitecture(encoding.pairs + ((p, a),)) for p in preds for a in activations]
    if isinstance(encoding, FusionPlan):
        used = set(encoding.modalities)
        fresh = [m for m in modalities if m not in used]
        if not encoding.steps:
            order = {m: i for i, m in enumerate(modalities)}
            return [FusionPlan(((*sorted((encoding.base, m), key=order.get), a),))
                    for m in fresh for a in activations]
        last = _fused(len(encoding.steps) - 1)
        return [FusionPlan(encoding.steps + ((last, m, a),)) for m in fresh for a in activations]
    raise TypeError(f"not an architecture encoding: {encoding!r}")


def max_depth(space: str, n_nodes: int, modalities=MODALITIES) -> int:
    return len(modalities) if space == "fusion" else n_nodes


# candidates and surrogate

@dataclass
class Candidate:
    encoding: object
    depth: int
    predicted: float | None = None
    _measured: float | None = None
    wall_time: float = 0.0
    flagged: str | None = None

    @property
    def measured(self) -> float | None:
        return self._measured

    def set_measured(self, value: float):
        if self._measured is not None:
            raise AttributeError("measured score is already set")
        self._measured = float(value)

    @property
    def key(self) -> str:
        return self.encoding.to_json()


class Surrogate:
    """Token embedding -> LSTM -> sigmoid regressor of validation AUC."""

    def __init__(self, embed_dim: int = 16, hidden: int = 32, lr: float = 1e-2, steps: int = 150, seed: int = 0):
        self.store = SharedParameterStore(seed)
        self.embedding = self.store.create("sur/embed", (N_TOKENS, embed_dim))
        self.lstm = LSTMCell(self.store, embed_dim, hidden, prefix="sur/lstm")
        self.W = self.store.create("sur/out/W", (hidden, 1))
        self.b = self.store.create("sur/out/b", (1,), init="zeros")
        self.store.freeze()
        self.optimizer = nc.Adam(lr=lr)
        self.steps = steps

    def parameters(self):
        return self.store.tensors()

    def _logits(self, tokens: np.ndarray) -> nc.Tensor:
        state = self.lstm.initial_state(tokens.shape[0])
        for t in range(tokens.shape[1]):
            state = self.lstm(nc.gather_rows(self.embedding, tokens[:, t]), state)
        return nc.column(nc.affine(state[0], self.W, self.b), 0)

    @staticmethod
    def _groups(encodings) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, e in enumerate(encodings):
            groups.setdefault(len(tokenize(e)), []).append(i)
        return groups

    def predict(self, encodings) -> np.ndarray:
        out = np.zeros(len(encodings))
        with nc.no_grad():
            for _, idx in sorted(self._groups(encodings).items()):
                toks = np.array([tokenize(encodings[i]) for i in idx])
                out[idx] = nc.logistic(self._logits(toks).data)
        return out

    def fit(self, encodings, scores, steps: int | None = None) -> float:
        """Squared-error regression of ``scores``; returns the final loss."""
        scores = np.asarray(scores, dtype=np.float64)
        groups = sorted(self._groups(encodings).items())
        params = self.parameters()
        loss_val = float("nan")
        for _ in range(self.steps if steps is None else steps):
            total = None
            for _, idx in groups:
                toks = np.array([tokenize(encodings[i]) for i in idx])
                pred = nc.sigmoid(self._logits(toks))
                term = nc.mse(pred, scores[idx]) * (len(idx) / len(scores))
                total = term if total is None else total + term
            nc.Adam.zero_grad(params)
            nc.backward(total)
            self.optimizer.step(params)
            loss_val = total.item()
        nc.Adam.zero_grad(params)
        return loss_val


def update_surrogate(surrogate: Surrogate, history: Sequence[Candidate], steps: int | None = None) -> Surrogate:
    done = [c for c in history if c.measured is not None]
    if not done:
        raise ValueError("surrogate update needs at least one measured candidate")
    surrogate.fit([c.encoding for c in done], [c.measured for c in done], steps)
    return surrogate


def sample_k(frontier: Sequence, scores, k: int, temperature: float, rng: np.random.Generator) -> list:
    """Draw ``k`` items without replacement, P(item) proportional to exp(score / temperature)."""
    if len(frontier) == 0:
        raise ValueError("cannot sample from an empty frontier")
    scores = np.asarray(scores, dtype=np.float64)
    if k >= len(frontier):
        return list(frontier)
    if temperature <= 0:
        order = np.argsort(-scores, kind="stable")[:k]
        return [frontier[i] for i in order]
    remaining = list(range(len(frontier)))
    picked = []
    for _ in range(k):
        z = scores[remaining] / temperature
        p = np.exp(z - z.max())
        p /= p.sum()
        j = int(rng.choice(len(remaining), p=p))
        picked.append(frontier[remaining.pop(j)])
    return picked


# evaluation

@dataclass
class SearchConfig:
    space: str = "multimodal"
    depth_limit: int = 5
    k: int = 8
    beam: int | None = None
    budget_epochs: int = 2
    temperature: float = 0.05
    seed: int = 0
    n_nodes: int = 5
    hidden: int = 100
    embed_dim: int = 100
    lr: float = 1e-2
    weight_decay: float = 0.0
    eps: float = 1e-8
    batch_size: int = 32
    surrogate_steps: int = 150
    concurrency: str = "sequential"
    threads: int = 1
    activations: tuple[str, ...] = ACTIVATIONS
    modalities: tuple[str, ...] = MODALITIES


@dataclass
class SearchContext:
    """Everything candidates share: data, the weight store and its optimizer."""
    config: SearchConfig
    train: Sequence[EncodedSequence]
    valid: Sequence[EncodedSequence]
    n_skills: int
    store: SharedParameterStore
    optimizer: nc.Adam

    def train_config(self, seed: int) -> TrainConfig:
        c = self.config
        return TrainConfig(epochs=c.budget_epochs, lr=c.lr, weight_decay=c.weight_decay, eps=c.eps,
                           batch_size=c.batch_size, seed=seed)


def make_context(cfg: SearchConfig, train_seqs, valid_seqs, n_skills: int, dims: dict[str, int]) -> SearchContext:
    if cfg.space not in ("cell", "fusion", "multimodal"):
        raise ConfigurationError(f"unknown search space {cfg.space!r}")
    if cfg.concurrency not in ("sequential", "snapshot"):
        raise ConfigurationError(f"unknown concurrency mode {cfg.concurrency!r}")
    if cfg.k < 1 or cfg.depth_limit < 1:
        raise ConfigurationError("k and depth_limit must be positive")
    store = build_store(cfg.space, n_skills, dims, cfg.hidden, cfg.embed_dim, cfg.n_nodes, cfg.seed)
    return SearchContext(cfg, train_seqs, valid_seqs, n_skills, store,
                         nc.Adam(lr=cfg.lr, eps=cfg.eps, weight_decay=cfg.weight_decay))


def evaluate_candidate(candidate: Candidate, ctx: SearchContext, seed: int,
                       store: SharedParameterStore | None = None, optimizer: nc.Adam | None = None) -> float:
    """Train the candidate on the shared store for the epoch budget and score validation AUC.

    Non-finite training scores the candidate 0 and flags it.
    """
    store = store or ctx.store
    optimizer = optimizer or ctx.optimizer
    model = model_for_encoding(candidate.encoding, store, ctx.n_skills, ctx.config.hidden, ctx.config.embed_dim)
    t0 = time.perf_counter()
    try:
        if ctx.config.budget_epochs > 0:
            train(model, ctx.train, ctx.train_config(seed), optimizer, np.random.default_rng(seed))
        score = auc(predict(model, ctx.valid))
    except nc.NonFiniteError as exc:
        candidate.flagged = f"non-finite: {exc}"
        score = 0.0
    except UndefinedMetricError as exc:
        candidate.flagged = f"undefined metric: {exc}"
        score = 0.0
    candidate.wall_time = time.perf_counter() - t0
    candidate.set_measured(score)
    return score


def _evaluate_snapshot(cands: list[Candidate], ctx: SearchContext, seeds: list[int]):
    """Evaluate candidates concurrently on store copies, merge last-writer-wins per tensor."""
    def run(i):
        store, opt = copy.deepcopy((ctx.store, ctx.optimizer))
        opt._moments = {id(st[0]): st for st in opt._moments.values()}
        evaluate_candidate(cands[i], ctx, seeds[i], store, opt)
        model = model_for_encoding(cands[i].encoding, store, ctx.n_skills, ctx.config.hidden, ctx.config.embed_dim)
        return {p.name: p.data for p in model.parameters()}

    with ThreadPoolExecutor(max_workers=max(1, ctx.config.threads)) as pool:
        written = list(pool.map(run, range(len(cands))))
    for w in written:
        for name, arr in w.items():
            ctx.store[name].data[...] = arr


# the search loop

@dataclass
class SearchState:
    depth: int = 0
    history: list[Candidate] = field(default_factory=list)
    pending: list[Candidate] = field(default_factory=list)
    retained: list = field(default_factory=list)
    rng_state: dict | None = None
    evaluations: int = 0
    finished: int = 0


@dataclass
class SearchResult:
    history: list[Candidate]
    best: list[Candidate]
    best_curve: list[float]
    store: SharedParameterStore | None = None


def _history_line(c: Candidate, seed: int) -> str:
    return json.dumps({"encoding": c.encoding.to_list(), "space": space_of(c.encoding), "depth": c.depth,
                       "predicted": c.predicted, "measured": c.measured, "wall_time": round(c.wall_time, 6),
                       "seed": seed, "flagged": c.flagged})


def read_history(path: str) -> list[dict]:
    """Parse a history file, skipping (and logging) corrupted lines."""
    out = []
    if not os.path.exists(path):
        return out
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                row["encoding"] = parse_encoding(row["space"], row["encoding"])
                out.append(row)
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("skipping corrupted history line %d: %s", i, exc)
    return out


class SMBOSearch:
    """Stateful search loop; call :meth:`run` (optionally resumable via a checkpoint)."""

    def __init__(self, cfg: SearchConfig, train_seqs, valid_seqs, n_skills: int, dims: dict[str, int],
                 history_path: str | None = None, checkpoint_path: str | None = None):
        self.cfg = cfg
        self.ctx = make_context(cfg, train_seqs, valid_seqs, n_skills, dims)
        self.surrogate = Surrogate(seed=cfg.seed, steps=cfg.surrogate_steps)
        self.rng = np.random.default_rng(cfg.seed)
        self.state = SearchState()
        self.history_path = history_path
        self.checkpoint_path = checkpoint_path
        self.init_events_at_start = self.ctx.store.init_events
        self.depth_limit = min(cfg.depth_limit, max_depth(cfg.space, cfg.n_nodes, cfg.modalities))

    # persistence
    def save_checkpoint(self):
        if not self.checkpoint_path:
            return
        self.state.rng_state = self.rng.bit_generator.state
        blob = {"state": self.state, "store": self.ctx.store.snapshot(),
                "optimizer": self._optimizer_state(self.ctx.optimizer, self.ctx.store),
                "surrogate": self.surrogate.store.snapshot(),
                "surrogate_optimizer": self._optimizer_state(self.surrogate.optimizer, self.surrogate.store)}
        tmp = self.checkpoint_path + ".tmp"
        with open(tmp, "wb") as fh:
            pickle.dump(blob, fh)
        os.replace(tmp, self.checkpoint_path)

    @staticmethod
    def _optimizer_state(opt: nc.Adam, store: SharedParameterStore):
        out = {"step_count": opt.step_count, "moments": {}}
        for k in store.keys():
            m = opt.moments(store[k])
            if m is not None:
                out["moments"][k] = (m[0].copy(), m[1].copy(), m[2])
        return out

    @staticmethod
    def _load_optimizer(opt: nc.Adam, store: SharedParameterStore, blob):
        opt.step_count = blob["step_count"]
        opt._moments = {id(store[k]): [store[k], m.copy(), v.copy(), t] for k, (m, v, t) in blob["moments"].items()}

    def load_checkpoint(self) -> bool:
        if not self.checkpoint_path or not os.path.exists(self.checkpoint_path):
            return False
        with open(self.checkpoint_path, "rb") as fh:
            blob = pickle.load(fh)
        self.state = blob["state"]
        self.ctx.store.restore(blob["store"])
        self._load_optimizer(self.ctx.optimizer, self.ctx.store, blob["optimizer"])
        self.surrogate.store.restore(blob["surrogate"])
        self._load_optimizer(self.surrogate.optimizer, self.surrogate.store, blob["surrogate_optimizer"])
        self.rng.bit_generator.state = self.state.rng_state
        if self.history_path:
            logged = read_history(self.history_path)
            seen = {json.dumps(r["encoding"].to_list()) for r in logged}
            for c in self.state.history:
                if c.key not in seen:
                    self._append(c)
        return True

    def _append(self, c: Candidate):
        if self.history_path:
            with open(self.history_path, "a") as fh:
                fh.write(_history_line(c, self.cfg.seed) + "\n")

    # loop
    def unfold(self) -> list:
        s = self.state
        if s.depth == 1:
            return initial_candidates(self.cfg.space, self.cfg.activations, self.cfg.modalities)
        seen = {c.key for c in s.history}
        out, keys = [], set()
        for prefix in s.retained:
            for e in extend(prefix, self.cfg.activations, self.cfg.modalities):
                k = e.to_json()
                if k not in keys and k not in seen:
                    keys.add(k)
                    out.append(e)
        return out

    def _select(self) -> list[Candidate]:
        frontier = self.unfold()
        if not frontier:
            return []
        trained = any(c.measured is not None for c in self.state.history)
        preds = self.surrogate.predict(frontier) if trained else np.full(len(frontier), np.nan)
        if self.state.depth == 1 or len(frontier) <= self.cfg.k:
            chosen = list(range(len(frontier)))
        else:
            chosen = sample_k(list(range(len(frontier))), preds, self.cfg.k, self.cfg.temperature, self.rng)
        return [Candidate(frontier[i], self.state.depth, None if np.isnan(preds[i]) else float(preds[i]))
                for i in chosen]

    def _candidate_seed(self) -> int:
        return int(self.cfg.seed * 100003 + self.state.evaluations)

    def _finish_depth(self):
        s = self.state
        update_surrogate(self.surrogate, s.history)
        this_depth = [c for c in s.history if c.depth == s.depth]
        this_depth.sort(key=lambda c: -c.measured)
        s.retained = [c.encoding for c in this_depth[: (self.cfg.beam or self.cfg.k)]]

    def run(self, resume: bool = False) -> SearchResult:
        if resume:
            self.load_checkpoint()
        s = self.state
        while True:
            if s.pending:
                self._evaluate_pending()
                self.save_checkpoint()
                continue
            if s.finished < s.depth:
                self._finish_depth()
                s.finished = s.depth
                self.save_checkpoint()
            if s.depth >= self.depth_limit:
                break
            s.depth += 1
            s.pending = self._select()
            if not s.pending:
                s.depth -= 1
                break
            self.save_checkpoint()
        if self.ctx.store.init_events != self.init_events_at_start:
            raise RuntimeError("shared weights were re-initialised during the search")
        return self.result()

    def _evaluate_pending(self):
        s = self.state
        if self.cfg.concurrency == "snapshot":
            batch, s.pending = s.pending, []
            seeds = []
            for _ in batch:
                seeds.append(self._candidate_seed())
                s.evaluations += 1
            _evaluate_snapshot(batch, self.ctx, seeds)
        else:
            batch = [s.pending.pop(0)]
            evaluate_candidate(batch[0], self.ctx, self._candidate_seed())
            s.evaluations += 1
        for c in batch:
            s.history.append(c)
            self._append(c)
            log.info("depth %d  %s  measured=%.4f", c.depth, c.key, c.measured)

    def result(self) -> SearchResult:
        hist = self.state.history
        curve, best = [], -np.inf
        for c in hist:
            best = max(best, c.measured)
            curve.append(best)
        ranked = sorted(hist, key=lambda c: -c.measured)
        return SearchResult(ranked, ranked[:5], curve, self.ctx.store)


def smbo_search(cfg: SearchConfig, train_seqs, valid_seqs, n_skills: int, dims: dict[str, int],
                history_path: str | None = None, checkpoint_path: str | None = None,
                resume: bool = False) -> SearchResult:
    return SMBOSearch(cfg, train_seqs, valid_seqs, n_skills, dims, history_path, checkpoint_path).run(resume)


def config_dict(cfg: SearchConfig) -> dict:
    return asdict(cfg)

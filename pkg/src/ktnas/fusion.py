"""Multimodal models: modality embeddings, per-skill encoders, fusion plans
(fixed LSTM on a searched fusion) and the multimodal DAG cell.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .cells import (ArchitectureError, CellArchitecture, KTModel, LSTMCell, OutputHead,
                    SharedParameterStore, StepInputs, create_cell_parameters, dag_forward,
                    leaf_nodes, _edge_key, _input_key)
from .data import MODALITIES
from .numcore import ACTIVATIONS, ConfigurationError, Tensor

EMBED_DIM = 100


def _fused(k: int) -> str:
    return f"fused_{k}"


def _is_fused(name) -> bool:
    return isinstance(name, str) and name.startswith("fused_") and name[6:].isdigit()


# fusion plans

@dataclass(frozen=True)
class FusionPlan:
    """Ordered pairwise fusion steps ``(left, right, activation)``.

    Step ``k`` produces ``fused_k``. A plan with no steps and a ``base``
    modality uses that single modality unfused.
    """
    steps: tuple[tuple[str, str, str], ...] = ()
    base: str | None = None

    @classmethod
    def from_list(cls, seq) -> "FusionPlan":
        seq = [list(s) for s in seq]
        if len(seq) == 1 and len(seq[0]) == 1:
            return cls((), str(seq[0][0]))
        return cls(tuple((str(l), str(r), str(a)) for l, r, a in seq))

    @classmethod
    def from_json(cls, text: str) -> "FusionPlan":
        return cls.from_list(json.loads(text))

    def to_list(self) -> list:
        if not self.steps:
            return [[self.base]]
        return [list(s) for s in self.steps]

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    def __len__(self):
        return max(1, len(self.steps))

    @property
    def modalities(self) -> list[str]:
        if not self.steps:
            return [self.base]
        return [o for l, r, _ in self.steps for o in (l, r) if not _is_fused(o)]

    def validate(self, vocabulary=MODALITIES) -> "FusionPlan":
        if not self.steps:
            if self.base not in vocabulary:
                raise ArchitectureError(f"unknown modality {self.base!r}")
            return self
        fresh: set[str] = set()
        pending: set[str] = set()
        for k, (l, r, a) in enumerate(self.steps):
            if a not in ACTIVATIONS:
                raise ArchitectureError(f"step {k}: unknown activation {a!r}")
            if l == r:
                raise ArchitectureError(f"step {k}: operand {l!r} fused with itself")
            for op in (l, r):
                if _is_fused(op):
                    if op not in pending:
                        raise ArchitectureError(f"step {k}: operand {op!r} is not an available intermediate")
                    pending.discard(op)
                elif op in vocabulary:
                    if op in fresh:
                        raise ArchitectureError(f"step {k}: modality {op!r} used twice")
                    fresh.add(op)
                else:
                    raise ArchitectureError(f"step {k}: unknown operand {op!r}")
            pending.add(_fused(k))
        if pending != {_fused(len(self.steps) - 1)}:
            raise ArchitectureError(f"plan leaves unconsumed intermediates {sorted(pending)}")
        return self


@dataclass(frozen=True)
class MultimodalArchitecture:
    """DAG cell whose input nodes each read one modality.

    A pair ``(modality_name, act)`` is an input node; ``(j, act)`` reads
    earlier node ``j`` (0 = previous hidden state).
    """
    pairs: tuple[tuple[object, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((p, a) for p, a in self.pairs))

    @classmethod
    def from_list(cls, seq) -> "MultimodalArchitecture":
        return cls(tuple((p if isinstance(p, str) else int(p), str(a)) for p, a in seq))

    @classmethod
    def from_json(cls, text: str) -> "MultimodalArchitecture":
        return cls.from_list(json.loads(text))

    @classmethod
    def from_cell(cls, arch: CellArchitecture, modality: str) -> "MultimodalArchitecture":
        """Embed a unimodal cell by feeding ``modality`` to its input node."""
        pairs = list(arch.pairs)
        pairs[0] = (modality, pairs[0][1])
        return cls(tuple(pairs))

    def to_list(self) -> list:
        return [[p, a] for p, a in self.pairs]

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    def __len__(self):
        return len(self.pairs)

    @property
    def modalities(self) -> list[str]:
        return [p for p, _ in self.pairs if isinstance(p, str)]

    def leaves(self) -> list[int]:
        return leaf_nodes(self.pairs)

    def validate(self, vocabulary=MODALITIES, max_nodes: int | None = None) -> "MultimodalArchitecture":
        if not self.pairs:
            raise ArchitectureError("architecture has no nodes")
        if max_nodes is not None and len(self.pairs) > max_nodes:
            raise ArchitectureError(f"{len(self.pairs)} nodes exceed the search space limit {max_nodes}")
        if not isinstance(self.pairs[0][0], str):
            raise ArchitectureError("node 1 must be an input node")
        seen: set[str] = set()
        for i, (p, a) in enumerate(self.pairs, start=1):
            if a not in ACTIVATIONS:
                raise ArchitectureError(f"node {i}: unknown activation {a!r}")
            if isinstance(p, str):
                if p not in vocabulary:
                    raise ArchitectureError(f"node {i}: unknown modality {p!r}")
                if p in seen:
                    raise ArchitectureError(f"modality {p!r} assigned to two input nodes")
                seen.add(p)
            elif not 0 <= p < i:
                raise ArchitectureError(f"node {i} references node {p}, which is not an earlier node")
        return self


# parameters

def _embed_key(m: str) -> str:
    return f"embed/{m}"


def _check_modality(m: str):
    if m not in MODALITIES:
        raise ConfigurationError(f"unknown modality {m!r}; expected one of {MODALITIES}")


def create_embeddings(store: SharedParameterStore, dims: dict[str, int], embed_dim: int = EMBED_DIM):
    for m in MODALITIES:
        store.create(_embed_key(m), (dims[m], embed_dim))


def create_encoder_bank(store: SharedParameterStore, prefix: str, n_skills: int, embed_dim: int = EMBED_DIM):
    """One (embed_dim x embed_dim) fully connected encoder per skill."""
    store.create(f"{prefix}/W", (n_skills, embed_dim, embed_dim))
    store.create(f"{prefix}/b", (n_skills, embed_dim), init="zeros")


def embed(store: SharedParameterStore, modality: str, values) -> Tensor:
    """Linear embedding of an encoded modality into the shared space."""
    _check_modality(modality)
    return nc.affine(nc.as_tensor(values), store[_embed_key(modality)])


def skill_encode(store: SharedParameterStore, prefix: str, x: Tensor, skills) -> Tensor:
    return nc.bank_affine(x, store[f"{prefix}/W"], skills, store[f"{prefix}/b"])


def _step_key(k: int, left: str, right: str, part: str) -> str:
    return f"fusion/{k}/{left}+{right}/{part}"


def create_fusion_step(store: SharedParameterStore, k: int, left: str, right: str,
                       embed_dim: int = EMBED_DIM):
    if _step_key(k, left, right, "W") not in store:
        store.create(_step_key(k, left, right, "W"), (2 * embed_dim, embed_dim))
        store.create(_step_key(k, left, right, "b"), (embed_dim,), init="zeros")


def chain_plan_steps(modalities=MODALITIES):
    """Every (position, left, right) a chain-shaped plan over ``modalities`` can use."""
    out = [(0, l, r) for l, r in itertools.combinations(modalities, 2)]
    for k in range(1, len(modalities) - 1):
        out += [(k, _fused(k - 1), m) for m in modalities]
    return out


def apply_fusion_plan(plan: FusionPlan, store: SharedParameterStore, embedded: dict[str, Tensor],
                      skills=None, encoder: str | None = "enc/fused") -> Tensor:
    """Fuse embedded modalities step by step, then apply the skill's encoder.

    Each step computes ``act([left; right] @ W + b)``. With ``encoder=None``
    the fused representation is returned without skill encoding.
    """
    if not plan.steps:
        if plan.base not in embedded:
            raise ArchitectureError(f"plan needs modality {plan.base!r}, which was not supplied")
        fused = embedded[plan.base]
    else:
        avail = dict(embedded)
        for k, (l, r, act) in enumerate(plan.steps):
            for op in (l, r):
                if op not in avail:
                    raise ArchitectureError(f"step {k}: operand {op!r} is not available")
            joined = nc.concat([avail[l], avail[r]])
            avail[_fused(k)] = nc.activate(act, nc.affine(joined, store[_step_key(k, l, r, "W")],
                                                          store[_step_key(k, l, r, "b")]))
        fused = avail[_fused(len(plan.steps) - 1)]
    if encoder is None:
        return fused
    return skill_encode(store, encoder, fused, skills)


def multimodal_cell_forward(arch: MultimodalArchitecture, store: SharedParameterStore,
                            embedded: dict[str, Tensor], h_prev: Tensor) -> Tensor:
    """One step of the multimodal DAG cell; ``embedded`` holds skill-encoded modalities."""
    arch.validate()
    return dag_forward(arch.pairs, store, embedded, nc.as_tensor(h_prev))


# models

class FusionKT(KTModel):
    """Searched fusion plan -> per-skill encoder -> fixed LSTM -> per-skill logits."""

    def __init__(self, plan: FusionPlan, store: SharedParameterStore, n_skills: int,
                 embed_dim: int = EMBED_DIM, hidden: int = 100):
        self.plan, self.store, self.n_skills = plan.validate(), store, n_skills
        self.embed_dim, self.hidden = embed_dim, hidden
        self.lstm = LSTMCell(store, embed_dim, hidden)
        self.head = OutputHead(store, hidden, n_skills)

    def parameters(self):
        keys = [_embed_key(m) for m in self.plan.modalities] + ["enc/fused/W", "enc/fused/b"]
        for k, (l, r, _) in enumerate(self.plan.steps):
            keys += [_step_key(k, l, r, "W"), _step_key(k, l, r, "b")]
        return [self.store[k] for k in keys] + self.lstm.parameters() + self.head.parameters()

    def initial_state(self, batch):
        return self.lstm.initial_state(batch)

    def step(self, inputs: StepInputs, state):
        emb = {m: embed(self.store, m, inputs.modalities[m]) for m in self.plan.modalities}
        x = apply_fusion_plan(self.plan, self.store, emb, inputs.skills)
        return self.lstm(x, state)

    def predict(self, state, next_skills):
        return nc.pick(self.head(state[0]), next_skills)


def fusion_store(n_skills: int, dims: dict[str, int], embed_dim: int = EMBED_DIM, hidden: int = 100,
                 seed: int = 0, plans=None) -> SharedParameterStore:
    """Store for fusion models; covers every chain plan unless ``plans`` narrows it."""
    store = SharedParameterStore(seed)
    create_embeddings(store, dims, embed_dim)
    steps = chain_plan_steps() if plans is None else [
        (k, l, r) for p in plans for k, (l, r, _) in enumerate(p.steps)]
    for k, l, r in steps:
        create_fusion_step(store, k, l, r, embed_dim)
    create_encoder_bank(store, "enc/fused", n_skills, embed_dim)
    LSTMCell(store, embed_dim, hidden)
    OutputHead(store, hidden, n_skills)
    return store.freeze()


class NASExtendKT(KTModel):
    """Per-modality embedding and skill encoders feeding a multimodal DAG cell."""

    def __init__(self, arch: MultimodalArchitecture, store: SharedParameterStore, n_skills: int,
                 embed_dim: int = EMBED_DIM, hidden: int = 100):
        self.arch, self.store, self.n_skills = arch.validate(), store, n_skills
        self.embed_dim, self.hidden = embed_dim, hidden
        self.head = OutputHead(store, hidden, n_skills)

    def parameters(self):
        keys = []
        for i, (p, _) in enumerate(self.arch.pairs, start=1):
            if isinstance(p, str):
                keys += [_embed_key(p), f"enc/{p}/W", f"enc/{p}/b"]
                keys += [_input_key(p, i, part) for part in ("xc", "hc", "xh", "hh")]
            else:
                keys += [_edge_key(p, i, "c"), _edge_key(p, i, "h")]
        return [self.store[k] for k in keys] + self.head.parameters()

    def initial_state(self, batch):
        return Tensor(np.zeros((batch, self.hidden)))

    def encode_inputs(self, inputs: StepInputs) -> dict[str, Tensor]:
        return {m: skill_encode(self.store, f"enc/{m}", embed(self.store, m, inputs.modalities[m]), inputs.skills)
                for m in self.arch.modalities}

    def step(self, inputs: StepInputs, state):
        return multimodal_cell_forward(self.arch, self.store, self.encode_inputs(inputs), state)

    def predict(self, state, next_skills):
        return nc.pick(self.head(state), next_skills)


def nas_extend_store(n_skills: int, dims: dict[str, int], embed_dim: int = EMBED_DIM, hidden: int = 100,
                     n_nodes: int = 5, seed: int = 0) -> SharedParameterStore:
    store = SharedParameterStore(seed)
    create_embeddings(store, dims, embed_dim)
    for m in MODALITIES:
        create_encoder_bank(store, f"enc/{m}", n_skills, embed_dim)
    create_cell_parameters(store, {m: embed_dim for m in MODALITIES}, hidden, n_nodes, input_positions="any")
    OutputHead(store, hidden, n_skills)
    return store.freeze()


# Architectures reported as best for the two multimodal searches.
REPORTED_FUSION_PLAN = FusionPlan.from_list([
    ["time_spent", "attempts", "tanh"],
    ["fused_0", "first_action", "tanh"],
    ["fused_1", "response", "sigmoid"],
])
REPORTED_MULTIMODAL_CELL = MultimodalArchitecture.from_list([["first_action", "sigmoid"], ["response", "relu"]])

"""Recurrent cells: the searchable DAG cell, a fixed LSTM, DKT and DKVMN.

The searchable cell is a layered DAG. Node 1 reads the step input together
with the previous hidden state; every later node picks one earlier node
(node 0 is the previous hidden state) and one activation. A node computes a
sigmoid gate ``c`` and mixes the activated projection with its input::

    c = sigmoid(h_in @ Wc)
    h = c * f(h_in @ Wh) + (1 - c) * h_in

and the cell output is the mean over leaf nodes (nodes no later node reads).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import numcore as nc
from .numcore import ACTIVATIONS, DimensionError, Tensor


class ArchitectureError(ValueError):
    pass


class StoreFrozenError(RuntimeError):
    pass


# shared parameters

class SharedParameterStore:
    """Named weight bank shared by every sampled sub-model.

    Tensors are created up front and the store is then frozen; any later
    attempt to create (re-initialise) a tensor raises. Models hold the very
    same ``Tensor`` objects, so an update made while training one candidate is
    what the next candidate reads.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}
        self.init_events = 0
        self.frozen = False

    def create(self, key: str, shape, init: str = "glorot") -> Tensor:
        if self.frozen:
            raise StoreFrozenError(f"store is frozen; refusing to initialise {key!r}")
        if key in self._tensors:
            raise KeyError(f"duplicate store key {key!r}")
        t = nc.parameter(shape, self.rng, name=key, init=init)
        self._tensors[key] = t
        self.init_events += 1
        return t

    def freeze(self) -> "SharedParameterStore":
        self.frozen = True
        return self

    def __getitem__(self, key: str) -> Tensor:
        try:
            return self._tensors[key]
        except KeyError:
            raise KeyError(f"store has no tensor {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self._tensors

    def __len__(self):
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        # in place, so tensor identity survives
        for k, arr in snap.items():
            self._tensors[k].data[...] = arr


# architecture encoding

Pred = Union[int, str]


@dataclass(frozen=True)
class CellArchitecture:
    """Sequence of ``(previous_node, activation)`` pairs, one per node.

    Node ``i`` (1-based) reads node ``pairs[i-1][0]``. The first pair always
    reads the input node entry point 0.
    """
    pairs: tuple[tuple[int, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((p, a) for p, a in self.pairs))

    @classmethod
    def from_list(cls, seq) -> "CellArchitecture":
        return cls(tuple((int(p), str(a)) for p, a in seq))

    @classmethod
    def from_json(cls, text: str) -> "CellArchitecture":
        return cls.from_list(json.loads(text))

    def to_list(self) -> list:
        return [[p, a] for p, a in self.pairs]

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    def __len__(self):
        return len(self.pairs)

    def validate(self, max_nodes: int | None = None) -> "CellArchitecture":
        if not self.pairs:
            raise ArchitectureError("architecture has no nodes")
        if max_nodes is not None and len(self.pairs) > max_nodes:
            raise ArchitectureError(f"{len(self.pairs)} nodes exceed the search space limit {max_nodes}")
        for i, (p, a) in enumerate(self.pairs, start=1):
            if a not in ACTIVATIONS:
                raise ArchitectureError(f"node {i}: unknown activation {a!r}")
            if not isinstance(p, (int, np.integer)) or isinstance(p, bool):
                raise ArchitectureError(f"node {i}: predecessor must be a node index, got {p!r}")
            if i == 1 and p != 0:
                raise ArchitectureError("node 1 is the input node and must read node 0")
            if not 0 <= p < i:
                raise ArchitectureError(f"node {i} references node {p}, which is not an earlier node")
        return self

    def leaves(self) -> list[int]:
        return leaf_nodes(self.pairs)

    def decode(self) -> "CellDAG":
        self.validate()
        return CellDAG.from_pairs(self.pairs)


def leaf_nodes(pairs) -> list[int]:
    consumed = {p for p, _ in pairs if isinstance(p, (int, np.integer)) and p > 0}
    return [i for i in range(1, len(pairs) + 1) if i not in consumed]


@dataclass
class CellDAG:
    """Explicit graph form of an encoding: per-node input and activation plus child lists."""
    inputs: dict[int, Pred]
    activations: dict[int, str]
    children: dict[int, list[int]] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs) -> "CellDAG":
        dag = cls({}, {}, {0: []})
        for i, (p, a) in enumerate(pairs, start=1):
            dag.inputs[i] = p
            dag.activations[i] = a
            dag.children.setdefault(i, [])
            if isinstance(p, (int, np.integer)):
                dag.children.setdefault(int(p), []).append(i)
        return dag

    @property
    def n_nodes(self) -> int:
        return len(self.inputs)

    def leaves(self) -> list[int]:
        return [i for i in sorted(self.inputs) if not self.children.get(i)]

    def encode(self) -> list[tuple[Pred, str]]:
        return [(self.inputs[i], self.activations[i]) for i in sorted(self.inputs)]


@dataclass(frozen=True)
class CellSearchSpace:
    n_nodes: int = 5
    activations: tuple[str, ...] = ACTIVATIONS
    hidden: int = 100


# DAG forward

def _input_key(slot: str, node: int, part: str) -> str:
    return f"cell/in/{slot}/{node}/{part}"


def _edge_key(src: int, dst: int, role: str) -> str:
    return f"cell/edge/{src}-{dst}/{role}"


def create_cell_parameters(store: SharedParameterStore, input_dims: dict[str, int], hidden: int,
                           n_nodes: int, input_positions: str = "first") -> None:
    """Create every potential weight of the cell search space.

    ``input_positions="first"`` gives input slots to node 1 only (unimodal
    space); ``"any"`` lets every node position host an input node.
    """
    positions = [1] if input_positions == "first" else list(range(1, n_nodes + 1))
    for slot, dim in input_dims.items():
        for l in positions:
            store.create(_input_key(slot, l, "xc"), (dim, hidden))
            store.create(_input_key(slot, l, "hc"), (hidden, hidden))
            store.create(_input_key(slot, l, "xh"), (dim, hidden))
            store.create(_input_key(slot, l, "hh"), (hidden, hidden))
    for l in range(2, n_nodes + 1):
        for j in range(0, l):
            store.create(_edge_key(j, l, "c"), (hidden, hidden))
            store.create(_edge_key(j, l, "h"), (hidden, hidden))


def input_node(store: SharedParameterStore, slot: str, node: int, act: str, x: Tensor, h_prev: Tensor) -> Tensor:
    c = nc.sigmoid(nc.affine(x, store[_input_key(slot, node, "xc")])
                   + nc.affine(h_prev, store[_input_key(slot, node, "hc")]))
    cand = nc.activate(act, nc.affine(x, store[_input_key(slot, node, "xh")])
                       + nc.affine(h_prev, store[_input_key(slot, node, "hh")]))
    return c * cand + (1.0 - c) * h_prev


def inner_node(store: SharedParameterStore, src: int, node: int, act: str, h_src: Tensor) -> Tensor:
    c = nc.sigmoid(nc.affine(h_src, store[_edge_key(src, node, "c")]))
    cand = nc.activate(act, nc.affine(h_src, store[_edge_key(src, node, "h")]))
    return c * cand + (1.0 - c) * h_src


def dag_forward(pairs, store: SharedParameterStore, inputs: dict[str, Tensor], h_prev: Tensor,
                input_slot=None) -> Tensor:
    """Run one recurrent step of a DAG cell.

    A pair whose predecessor is a string is an input node fed by
    ``inputs[name]``; an integer predecessor is an earlier node (0 = previous
    hidden state). ``input_slot`` maps the first pair of a unimodal encoding
    onto its input slot.
    """
    outs: dict[int, Tensor] = {0: h_prev}
    for i, (p, act) in enumerate(pairs, start=1):
        if i == 1 and input_slot is not None:
            p = input_slot
        if isinstance(p, str):
            if p not in inputs:
                raise ArchitectureError(f"node {i} reads input {p!r}, which was not supplied")
            outs[i] = input_node(store, p, i, act, inputs[p], h_prev)
        else:
            if not 0 <= p < i:
                raise ArchitectureError(f"node {i} references node {p}, which is not an earlier node")
            outs[i] = inner_node(store, int(p), i, act, outs[int(p)])
    return nc.mean_of([outs[l] for l in leaf_nodes(pairs)])


def cell_forward(arch: CellArchitecture, store: SharedParameterStore, x_t: Tensor, h_prev: Tensor) -> Tensor:
    arch.validate()
    return dag_forward(arch.pairs, store, {"x": nc.as_tensor(x_t)}, nc.as_tensor(h_prev), input_slot="x")


# LSTM

class LSTMCell:
    """Standard four-gate LSTM with fused gate weights (gate order i, f, g, o)."""

    def __init__(self, store: SharedParameterStore | None, input_dim: int, hidden: int, prefix: str = "lstm"):
        self.input_dim, self.hidden, self.prefix = input_dim, hidden, prefix
        if store is None:
            store = SharedParameterStore()
        if f"{prefix}/Wx" not in store:
            store.create(f"{prefix}/Wx", (input_dim, 4 * hidden))
            store.create(f"{prefix}/Wh", (hidden, 4 * hidden))
            store.create(f"{prefix}/b", (4 * hidden,), init="zeros")
        self.Wx, self.Wh, self.b = store[f"{prefix}/Wx"], store[f"{prefix}/Wh"], store[f"{prefix}/b"]

    def parameters(self) -> list[Tensor]:
        return [self.Wx, self.Wh, self.b]

    def initial_state(self, batch: int):
        z = Tensor(np.zeros((batch, self.hidden)))
        return z, z

    def __call__(self, x: Tensor, state):
        return lstm_forward(x, state, self.Wx, self.Wh, self.b)


def lstm_forward(x_t, state, Wx: Tensor, Wh: Tensor, b: Tensor):
    h, c = state
    H = Wh.shape[0]
    if nc.as_tensor(x_t).shape[-1] != Wx.shape[0]:
        raise DimensionError(f"lstm: input shape {nc.as_tensor(x_t).shape} does not match weight {Wx.shape}")
    z = nc.affine(x_t, Wx, b) + nc.affine(h, Wh)
    i = nc.sigmoid(nc.slice_cols(z, 0, H))
    f = nc.sigmoid(nc.slice_cols(z, H, 2 * H))
    g = nc.tanh(nc.slice_cols(z, 2 * H, 3 * H))
    o = nc.sigmoid(nc.slice_cols(z, 3 * H, 4 * H))
    c_new = f * c + i * g
    h_new = o * nc.tanh(c_new)
    return h_new, c_new


# knowledge-tracing models

@dataclass
class StepInputs:
    """One time step for a batch: skill ids, responses and encoded modalities."""
    skills: np.ndarray
    responses: np.ndarray
    modalities: dict[str, np.ndarray] = field(default_factory=dict)


def dkt_input(skills, responses, n_skills: int) -> np.ndarray:
    """One-hot of skill crossed with correctness: index = skill + M * response."""
    skills = np.atleast_1d(np.asarray(skills, dtype=np.int64))
    responses = np.atleast_1d(np.asarray(responses, dtype=np.int64))
    if (skills < 0).any() or (skills >= n_skills).any():
        raise IndexError(f"skill id out of range [0, {n_skills})")
    out = np.zeros((len(skills), 2 * n_skills))
    out[np.arange(len(skills)), skills + n_skills * responses] = 1.0
    return out


class OutputHead:
    """Shared affine map from the hidden state to one logit per skill."""

    def __init__(self, store: SharedParameterStore, hidden: int, n_skills: int, zero_init: bool = False):
        if "head/W" not in store:
            store.create("head/W", (hidden, n_skills), init="zeros" if zero_init else "glorot")
            store.create("head/b", (n_skills,), init="zeros")
        self.W, self.b = store["head/W"], store["head/b"]

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, h: Tensor) -> Tensor:
        return nc.affine(h, self.W, self.b)


class KTModel:
    """Common protocol: ``step`` consumes attempt t, ``predict`` scores attempt t+1."""
    n_skills: int

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def initial_state(self, batch: int):
        raise NotImplementedError

    def step(self, inputs: StepInputs, state):
        raise NotImplementedError

    def predict(self, state, next_skills) -> Tensor:
        raise NotImplementedError


class RecurrentKT(KTModel):
    """Hidden-state recurrent model with a per-skill logit head.

    ``features`` turns a ``StepInputs`` into the cell input; ``cell`` is either
    an :class:`LSTMCell` or a searched DAG cell.
    """

    def __init__(self, store: SharedParameterStore, n_skills: int, hidden: int, cell, features,
                 extra_params=()):
        self.store, self.n_skills, self.hidden = store, n_skills, hidden
        self.cell, self.features = cell, features
        self.head = OutputHead(store, hidden, n_skills)
        self._extra = list(extra_params)

    def parameters(self):
        params = list(self._extra) + self.head.parameters()
        if isinstance(self.cell, LSTMCell):
            params += self.cell.parameters()
        elif isinstance(self.cell, SearchedCell):
            params += self.cell.parameters()
        return params

    def initial_state(self, batch):
        if isinstance(self.cell, LSTMCell):
            return self.cell.initial_state(batch)
        return Tensor(np.zeros((batch, self.hidden)))

    def hidden_of(self, state) -> Tensor:
        return state[0] if isinstance(state, tuple) else state

    def step(self, inputs, state):
        return self.cell(self.features(inputs), state)

    def logits(self, state) -> Tensor:
        return self.head(self.hidden_of(state))

    def predict(self, state, next_skills):
        return nc.pick(self.logits(state), next_skills)

    def probabilities(self, state) -> np.ndarray:
        return nc.logistic(self.logits(state).data)


class SearchedCell:
    """Adapter giving a unimodal :class:`CellArchitecture` the cell-call protocol."""

    def __init__(self, arch: CellArchitecture, store: SharedParameterStore):
        self.arch, self.store = arch.validate(), store

    def __call__(self, x, h_prev):
        return dag_forward(self.arch.pairs, self.store, {"x": nc.as_tensor(x)}, h_prev, input_slot="x")

    def parameters(self) -> list[Tensor]:
        keys = [_input_key("x", 1, p) for p in ("xc", "hc", "xh", "hh")]
        for i, (p, _) in enumerate(self.arch.pairs[1:], start=2):
            keys += [_edge_key(p, i, "c"), _edge_key(p, i, "h")]
        return [self.store[k] for k in keys]


def onehot_features(n_skills: int):
    def features(inp: StepInputs):
        return Tensor(dkt_input(inp.skills, inp.responses, n_skills))
    return features


def concat_features(n_skills: int, modalities=("time_spent", "attempts", "hints", "first_action")):
    """Early fusion: skill-by-correctness one-hot concatenated with every modality encoding."""
    def features(inp: StepInputs):
        parts = [dkt_input(inp.skills, inp.responses, n_skills)] + [inp.modalities[m] for m in modalities]
        return Tensor(np.concatenate(parts, axis=1))
    return features


def build_dkt(n_skills: int, hidden: int = 100, seed: int = 0, store: SharedParameterStore | None = None,
              zero_head: bool = False) -> RecurrentKT:
    store = store or SharedParameterStore(seed)
    if zero_head and "head/W" not in store:
        OutputHead(store, hidden, n_skills, zero_init=True)
    cell = LSTMCell(store, 2 * n_skills, hidden)
    return RecurrentKT(store, n_skills, hidden, cell, onehot_features(n_skills))


def build_dkt_sc(n_skills: int, modality_dims: dict[str, int], hidden: int = 100, seed: int = 0) -> RecurrentKT:
    store = SharedParameterStore(seed)
    extra = ("time_spent", "attempts", "hints", "first_action")
    in_dim = 2 * n_skills + sum(modality_dims[m] for m in extra)
    cell = LSTMCell(store, in_dim, hidden)
    return RecurrentKT(store, n_skills, hidden, cell, concat_features(n_skills, extra))


def nas_cell_store(n_skills: int, hidden: int, n_nodes: int, seed: int = 0) -> SharedParameterStore:
    store = SharedParameterStore(seed)
    create_cell_parameters(store, {"x": 2 * n_skills}, hidden, n_nodes, input_positions="first")
    OutputHead(store, hidden, n_skills)
    return store.freeze()


def build_nas_cell(arch: CellArchitecture, store: SharedParameterStore, n_skills: int, hidden: int) -> RecurrentKT:
    return RecurrentKT(store, n_skills, hidden, SearchedCell(arch, store), onehot_features(n_skills))


def dkt_step(model: RecurrentKT, skill_id, response, state=None):
    """Feed one attempt and return the per-skill probability vector and new state."""
    skills = np.atleast_1d(skill_id)
    if state is None:
        state = model.initial_state(len(skills))
    state = model.step(StepInputs(skills, np.atleast_1d(response)), state)
    return model.probabilities(state), state


def dkt_loss(outputs, next_skill_id, next_response) -> float:
    """Mean binary cross-entropy of the output entries selected by the next skills.

    ``outputs`` is a (T, M) array of per-skill probabilities; row t is scored
    against attempt t+1.
    """
    outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    idx = np.atleast_1d(next_skill_id)
    y = np.atleast_1d(next_response).astype(np.float64)
    p = np.clip(outputs[np.arange(len(idx)), idx], 1e-12, 1 - 1e-12)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


# DKVMN

def correlation_weight(k_t: Tensor, keys: Tensor) -> Tensor:
    return nc.softmax(nc.matmul(k_t, nc.transpose(keys)))


def dkvmn_read(k_t: Tensor, keys: Tensor, values: Tensor, readout=None):
    """Return ``(w, r, p)``: slot weights, read content and (optionally) the prediction logit.

    ``values`` is (B, N, dv); ``readout(r, k)`` produces the logit from the
    read content concatenated with the query embedding.
    """
    if keys.shape[0] != values.shape[-2]:
        raise DimensionError(f"key memory {keys.shape} and value memory {values.shape} slot counts differ")
    w = correlation_weight(k_t, keys)
    r = nc.weighted_rows(w, values)
    p = readout(r, k_t) if readout is not None else None
    return w, r, p


def dkvmn_write(values: Tensor, w: Tensor, erase: Tensor, add: Tensor) -> Tensor:
    """Erase then add: ``M'(i) = M(i) * (1 - w(i) e) + w(i) a``."""
    return values * (1.0 - nc.outer(w, erase)) + nc.outer(w, add)


class DKVMN(KTModel):
    def __init__(self, n_skills: int, n_slots: int = 20, key_dim: int = 50, value_dim: int = 100,
                 summary_dim: int = 50, seed: int = 0, store: SharedParameterStore | None = None):
        self.n_skills = n_skills
        self.store = s = store or SharedParameterStore(seed)
        self.q_embed = s.create("dkvmn/q_embed", (n_skills, key_dim))
        self.qa_embed = s.create("dkvmn/qa_embed", (2 * n_skills, value_dim))
        self.keys = s.create("dkvmn/keys", (n_slots, key_dim))
        self.init_values = s.create("dkvmn/values0", (n_slots, value_dim))
        self.We = s.create("dkvmn/erase/W", (value_dim, value_dim))
        self.be = s.create("dkvmn/erase/b", (value_dim,), init="zeros")
        self.Wa = s.create("dkvmn/add/W", (value_dim, value_dim))
        self.ba = s.create("dkvmn/add/b", (value_dim,), init="zeros")
        self.Wf = s.create("dkvmn/summary/W", (value_dim + key_dim, summary_dim))
        self.bf = s.create("dkvmn/summary/b", (summary_dim,), init="zeros")
        self.Wo = s.create("dkvmn/out/W", (summary_dim, 1))
        self.bo = s.create("dkvmn/out/b", (1,), init="zeros")

    def parameters(self):
        return self.store.tensors()

    def initial_state(self, batch):
        return nc.expand_rows(self.init_values, batch)

    def readout(self, r: Tensor, k: Tensor) -> Tensor:
        f = nc.tanh(nc.affine(nc.concat([r, k]), self.Wf, self.bf))
        return nc.affine(f, self.Wo, self.bo)

    def erase_add(self, skills, responses):
        v = nc.gather_rows(self.qa_embed, np.asarray(skills) + self.n_skills * np.asarray(responses))
        return nc.sigmoid(nc.affine(v, self.We, self.be)), nc.tanh(nc.affine(v, self.Wa, self.ba))

    def step(self, inputs, state):
        k = nc.gather_rows(self.q_embed, inputs.skills)
        w = correlation_weight(k, self.keys)
        e, a = self.erase_add(inputs.skills, inputs.responses)
        return dkvmn_write(state, w, e, a)

    def predict(self, state, next_skills):
        k = nc.gather_rows(self.q_embed, next_skills)
        _, _, p = dkvmn_read(k, self.keys, state, self.readout)
        return nc.column(p, 0)

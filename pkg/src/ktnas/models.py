"""Model registry: one constructor per model kind."""
from __future__ import annotations

import json

from .cells import (DKVMN, CellArchitecture, SharedParameterStore, build_dkt, build_dkt_sc,
                    build_nas_cell, nas_cell_store)
from .fusion import (FusionKT, FusionPlan, MultimodalArchitecture, NASExtendKT, fusion_store,
                     nas_extend_store)
from .numcore import ConfigurationError

MODEL_KINDS = ("dkt", "dkvmn", "nas-cell", "dkt-sc", "dkt-fs", "nas-extend")
ARCH_KINDS = {"nas-cell": "cell", "dkt-fs": "fusion", "nas-extend": "multimodal"}


def parse_encoding(space: str, obj):
    """Decode a JSON value (or JSON text) into the encoding type of ``space``."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    if space == "cell":
        return CellArchitecture.from_list(obj).validate()
    if space == "fusion":
        return FusionPlan.from_list(obj).validate()
    if space == "multimodal":
        return MultimodalArchitecture.from_list(obj).validate()
    raise ConfigurationError(f"unknown search space {space!r}")


def space_of(encoding) -> str:
    if isinstance(encoding, CellArchitecture):
        return "cell"
    if isinstance(encoding, FusionPlan):
        return "fusion"
    if isinstance(encoding, MultimodalArchitecture):
        return "multimodal"
    raise TypeError(f"not an architecture encoding: {encoding!r}")


def build_store(space: str, n_skills: int, dims: dict[str, int], hidden: int, embed_dim: int,
                n_nodes: int, seed: int, plans=None) -> SharedParameterStore:
    if space == "cell":
        return nas_cell_store(n_skills, hidden, n_nodes, seed)
    if space == "fusion":
        return fusion_store(n_skills, dims, embed_dim, hidden, seed, plans=plans)
    if space == "multimodal":
        return nas_extend_store(n_skills, dims, embed_dim, hidden, n_nodes, seed)
    raise ConfigurationError(f"unknown search space {space!r}")


def model_for_encoding(encoding, store: SharedParameterStore, n_skills: int, hidden: int, embed_dim: int):
    space = space_of(encoding)
    if space == "cell":
        return build_nas_cell(encoding, store, n_skills, hidden)
    if space == "fusion":
        return FusionKT(encoding, store, n_skills, embed_dim, hidden)
    return NASExtendKT(encoding, store, n_skills, embed_dim, hidden)


def build_model(kind: str, n_skills: int, dims: dict[str, int], hidden: int = 100, embed_dim: int = 100,
                seed: int = 0, encoding=None, n_nodes: int = 5, dkvmn_dims=(20, 50, 100)):
    """Fresh model of ``kind``; architecture kinds need an ``encoding`` of the matching space."""
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if kind in ARCH_KINDS:
        if encoding is None:
            raise ConfigurationError(f"model kind {kind!r} needs an architecture")
        if space_of(encoding) != ARCH_KINDS[kind]:
            raise ConfigurationError(f"model kind {kind!r} expects a {ARCH_KINDS[kind]} encoding, "
                                     f"got a {space_of(encoding)} encoding")
        n_nodes = max(n_nodes, len(encoding))
        plans = [encoding] if kind == "dkt-fs" else None
        store = build_store(ARCH_KINDS[kind], n_skills, dims, hidden, embed_dim, n_nodes, seed, plans)
        return model_for_encoding(encoding, store, n_skills, hidden, embed_dim)
    if encoding is not None:
        raise ConfigurationError(f"model kind {kind!r} takes no architecture")
    if kind == "dkt":
        return build_dkt(n_skills, hidden, seed)
    if kind == "dkt-sc":
        return build_dkt_sc(n_skills, dims, hidden, seed)
    slots, key_dim, value_dim = dkvmn_dims
    return DKVMN(n_skills, slots, key_dim, value_dim, seed=seed)

"""Interaction-log ingestion, modality encoding and fold assignment."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, TextIO

import numpy as np

from .numcore import ConfigurationError

log = logging.getLogger(__name__)

MODALITIES = ("response", "time_spent", "attempts", "hints", "first_action")
CANONICAL_FIELDS = ("student_id", "skill_id", "response", "time_spent", "attempts", "hints",
                    "first_action", "order")
FAST_RESPONSE_SECONDS = 1.0


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class InteractionRecord:
    student_id: str
    skill_id: int
    response: int
    time_spent: float | None
    attempts: int | None
    hints: int | None
    first_action: int | None
    order: int

    @property
    def fast_response(self) -> bool:
        # sub-second transactions are kept, only flagged
        return self.time_spent is not None and self.time_spent < FAST_RESPONSE_SECONDS


@dataclass
class ColumnMap:
    name: str
    student: str
    skill: str
    response: str
    time_spent: str | None = None
    attempts: str | None = None
    hints: str | None = None
    first_action: str | None = None
    order: str | None = None
    delimiter: str = ","
    time_scale: float = 1.0
    response_map: dict[str, int] = field(default_factory=lambda: {"0": 0, "1": 1})
    first_action_map: dict[str, int] = field(default_factory=lambda: {"0": 0, "1": 1})
    skill_is_index: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnMap":
        return cls(**d)

    @classmethod
    def load(cls, name_or_path: str) -> "ColumnMap":
        """Load a shipped map by name (``assistments_2009``) or a JSON file path."""
        pkg = resources.files("ktnas") / "column_maps" / f"{name_or_path}.json"
        if pkg.is_file():
            return cls.from_dict(json.loads(pkg.read_text()))
        with open(name_or_path) as fh:
            return cls.from_dict(json.load(fh))

    def required_columns(self) -> list[str]:
        cols = [self.student, self.skill, self.response, self.time_spent, self.attempts,
                self.hints, self.first_action, self.order]
        return list(dict.fromkeys(c for c in cols if c))


@dataclass
class ParsedLog:
    records: list[InteractionRecord]
    skill_vocab: dict[str, int]
    dropped: int = 0
    dropped_by_field: dict[str, int] = field(default_factory=dict)
    new_skills: list[str] = field(default_factory=list)
    forced_incorrect: int = 0

    @property
    def n_students(self) -> int:
        return len({r.student_id for r in self.records})

    @property
    def n_skills(self) -> int:
        return len(self.skill_vocab)

    @property
    def fast_responses(self) -> int:
        return sum(r.fast_response for r in self.records)

    def summary(self) -> dict:
        return {
            "records": len(self.records),
            "students": self.n_students,
            "skills": self.n_skills,
            "dropped": self.dropped,
            "dropped_by_field": dict(sorted(self.dropped_by_field.items())),
            "new_skills": len(self.new_skills),
            "forced_incorrect": self.forced_incorrect,
            "fast_responses": self.fast_responses,
        }


def _blank(v: str | None) -> bool:
    return v is None or v.strip() == "" or v.strip().upper() in ("NA", "NAN", "NULL")


def parse_interactions(source: TextIO | str, cmap: ColumnMap, missing: str = "drop",
                       skill_vocab: dict[str, int] | None = None) -> ParsedLog:
    """Parse a delimited interaction log into per-student ordered records.

    ``missing`` is ``"drop"`` (discard records with an empty modality cell) or
    ``"impute"`` (keep them with the modality set to ``None``, later encoded as
    the unknown bucket). Rows lacking student, skill or response are always
    dropped. Skill labels absent from ``skill_vocab`` get fresh indices and are
    listed in ``new_skills``.
    """
    if missing not in ("drop", "impute"):
        raise ConfigurationError(f"missing-value policy must be 'drop' or 'impute', got {missing!r}")
    if isinstance(source, str):
        source = io.StringIO(source)
    vocab = dict(skill_vocab or {})
    result = ParsedLog(records=[], skill_vocab=vocab)
    reader = csv.reader(source, delimiter=cmap.delimiter)
    header = next(reader, None)
    if header is None:
        return result
    header = [h.strip() for h in header]
    absent = [c for c in cmap.required_columns() if c not in header]
    if absent:
        raise SchemaError(f"header is missing columns {absent} required by column map {cmap.name!r}")
    pos = {c: header.index(c) for c in cmap.required_columns()}

    def drop(fieldname: str):
        result.dropped += 1
        result.dropped_by_field[fieldname] = result.dropped_by_field.get(fieldname, 0) + 1

    by_student: dict[str, list[InteractionRecord]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(lineno, f"expected {len(header)} fields, found {len(row)}")

        def cell(col):
            return None if col is None else row[pos[col]]

        student, skill, resp = cell(cmap.student), cell(cmap.skill), cell(cmap.response)
        if _blank(student):
            drop("student")
            continue
        if _blank(skill):
            drop("skill")
            continue
        if _blank(resp):
            drop("response")
            continue
        resp_key = resp.strip()
        if resp_key not in cmap.response_map:
            raise ParseError(lineno, f"unrecognised response value {resp!r}")
        response = int(cmap.response_map[resp_key])

        try:
            time_spent = None if _blank(cell(cmap.time_spent)) else float(cell(cmap.time_spent)) * cmap.time_scale
            attempts = None if _blank(cell(cmap.attempts)) else int(float(cell(cmap.attempts)))
            hints = None if _blank(cell(cmap.hints)) else int(float(cell(cmap.hints)))
            order = lineno if cmap.order is None or _blank(cell(cmap.order)) else int(cell(cmap.order))
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if time_spent is not None and (time_spent < 0 or not math.isfinite(time_spent)):
            time_spent = None
        if attempts is not None and attempts < 0:
            attempts = None
        if hints is not None and hints < 0:
            hints = None
        fa_raw = cell(cmap.first_action)
        if _blank(fa_raw):
            first_action = None
        else:
            if fa_raw.strip() not in cmap.first_action_map:
                raise ParseError(lineno, f"unrecognised first_action value {fa_raw!r}")
            first_action = int(cmap.first_action_map[fa_raw.strip()])

        values = {"time_spent": time_spent, "attempts": attempts, "hints": hints,
                  "first_action": first_action}
        empty = [k for k, col in (("time_spent", cmap.time_spent), ("attempts", cmap.attempts),
                                  ("hints", cmap.hints), ("first_action", cmap.first_action))
                 if col is not None and values[k] is None]
        if empty and missing == "drop":
            drop(empty[0])
            continue

        if cmap.skill_is_index:
            skill_id = int(skill)
            vocab.setdefault(str(skill_id), skill_id)
        else:
            label = skill.strip()
            if label not in vocab:
                vocab[label] = len(vocab)
                result.new_skills.append(label)
            skill_id = vocab[label]

        if first_action == 0 and response != 0:
            response = 0
            result.forced_incorrect += 1
        rec = InteractionRecord(student.strip(), skill_id, response, time_spent, attempts, hints,
                                first_action, order)
        by_student.setdefault(rec.student_id, []).append(rec)

    for recs in by_student.values():
        recs.sort(key=lambda r: r.order)  # stable: ties keep log order
        result.records.extend(recs)
    if result.new_skills and skill_vocab:
        log.warning("%d skill labels not in the supplied vocabulary were given fresh indices",
                    len(result.new_skills))
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_canonical(records: Iterable[InteractionRecord], out: TextIO) -> None:
    """Write records in the canonical tab-separated format (fixed field order)."""
    out.write("\t".join(CANONICAL_FIELDS) + "\n")
    for r in records:
        out.write("\t".join(_fmt(getattr(r, f)) for f in CANONICAL_FIELDS) + "\n")


def read_canonical(source: TextIO | str, missing: str = "impute") -> ParsedLog:
    return parse_interactions(source, ColumnMap.load("canonical"), missing=missing)


# sequences

@dataclass(frozen=True)
class StudentSequence:
    student_id: str
    records: tuple[InteractionRecord, ...]
    visits: tuple[int, ...]

    def __len__(self):
        return len(self.records)

    @property
    def skills(self) -> np.ndarray:
        return np.array([r.skill_id for r in self.records], dtype=np.int64)

    @property
    def responses(self) -> np.ndarray:
        return np.array([r.response for r in self.records], dtype=np.int64)


def visit_counts(skills: Iterable[int]) -> list[int]:
    seen: dict[int, int] = {}
    out = []
    for s in skills:
        seen[s] = seen.get(s, 0) + 1
        out.append(seen[s])
    return out


def build_sequences(records: Iterable[InteractionRecord], max_len: int = 200) -> list[StudentSequence]:
    """Group records per student (log order) and split long histories into chunks.

    Visit counters are computed over the whole student history before
    chunking, so later chunks keep their accumulated weights.
    """
    by_student: dict[str, list[InteractionRecord]] = {}
    for r in records:
        by_student.setdefault(r.student_id, []).append(r)
    out = []
    for sid, recs in by_student.items():
        visits = visit_counts(r.skill_id for r in recs)
        for start in range(0, len(recs), max_len):
            out.append(StudentSequence(sid, tuple(recs[start:start + max_len]),
                                       tuple(visits[start:start + max_len])))
    return out


def assign_time_weights(sequence: StudentSequence | Iterable[int]) -> list[int]:
    """Weight of each attempt = how many times the student has now seen its skill."""
    if isinstance(sequence, StudentSequence):
        return list(sequence.visits)
    return visit_counts(sequence)


# modality encoding

@dataclass(frozen=True)
class ModalityVector:
    modality: str
    values: np.ndarray


@dataclass(frozen=True)
class NormalizationStats:
    time_mean: float = 0.0
    time_std: float = 1.0
    attempts_cap: int = 5
    hints_cap: int = 5

    def dim(self, modality: str) -> int:
        return {"response": 2, "first_action": 2, "time_spent": 1,
                "attempts": self.attempts_cap + 2, "hints": self.hints_cap + 2}[modality]

    def dims(self) -> dict[str, int]:
        return {m: self.dim(m) for m in MODALITIES}


def compute_normalization(records: Iterable[InteractionRecord], attempts_cap: int = 5,
                          hints_cap: int = 5) -> NormalizationStats:
    """Statistics of log(1 + seconds); call on training-fold records only."""
    t = np.array([math.log1p(r.time_spent) for r in records if r.time_spent is not None])
    if t.size == 0:
        return NormalizationStats(attempts_cap=attempts_cap, hints_cap=hints_cap)
    std = float(t.std())
    return NormalizationStats(float(t.mean()), std if std > 0 else 1.0, attempts_cap, hints_cap)


def _bucket(values: np.ndarray, cap: int) -> np.ndarray:
    # last slot is the unknown bucket for imputed values
    out = np.zeros((len(values), cap + 2))
    for i, v in enumerate(values):
        out[i, cap + 1 if v is None else min(int(v), cap)] = 1.0
    return out


def _binary(values, n) -> np.ndarray:
    out = np.zeros((n, 2))
    for i, v in enumerate(values):
        if v is not None:
            out[i, int(v)] = 1.0
    return out


def encode_columns(records: list[InteractionRecord], stats: NormalizationStats) -> dict[str, np.ndarray]:
    """Encode every modality of a record list into per-modality (T, dim) arrays."""
    n = len(records)
    t = np.array([np.nan if r.time_spent is None or r.time_spent < 0 else r.time_spent for r in records],
                 dtype=np.float64)
    z = (np.log1p(t) - stats.time_mean) / stats.time_std
    z = np.where(np.isnan(z), 0.0, z)
    return {
        "response": _binary([r.response for r in records], n),
        "time_spent": z.reshape(n, 1),
        "attempts": _bucket([r.attempts for r in records], stats.attempts_cap),
        "hints": _bucket([r.hints for r in records], stats.hints_cap),
        "first_action": _binary([r.first_action for r in records], n),
    }


def encode_modalities(record: InteractionRecord, stats: NormalizationStats) -> list[ModalityVector]:
    cols = encode_columns([record], stats)
    return [ModalityVector(m, cols[m][0]) for m in MODALITIES]


# folds

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    folds: dict[str, int]

    def members(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.folds.items() if f == fold)

    def sizes(self) -> list[int]:
        return [sum(1 for f in self.folds.values() if f == i) for i in range(self.k)]


def kfold_split(students: Iterable[str], k: int, seed: int = 0) -> FoldAssignment:
    ids = sorted(set(students))
    if k < 2:
        raise ConfigurationError(f"need at least 2 folds, got {k}")
    if k > len(ids):
        raise ConfigurationError(f"{k} folds requested but only {len(ids)} students")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return FoldAssignment(k, {ids[j]: i % k for i, j in enumerate(perm)})

"""Command-line entry point: ingest, train, search, eval, compare, report."""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import plotting
from .data import (ColumnMap, ParseError, ParsedLog, SchemaError, build_sequences, compute_normalization,
                   kfold_split, parse_interactions, read_canonical, write_canonical)
from .metrics import IID_CAVEAT, PredictionTrace, TraceAlignmentError, UndefinedMetricError, mcnemar, report
from .models import ARCH_KINDS, MODEL_KINDS, build_model, parse_encoding
from .numcore import ConfigurationError
from .search import SearchConfig, SMBOSearch
from .synthetic import bkt_log, planted_log
from .training import TrainConfig, encode_sequences, predict, train

log = logging.getLogger("ktnas")

INCOMPLETE = ".incomplete"


@dataclass
class RunConfig:
    data: str = ""
    column_map: str = "canonical"
    missing: str = "drop"
    model: str = "dkt"
    arch: str = ""
    folds: int = 5
    seed: int = 0
    epochs: int = 10
    lr: float = 1e-2
    weight_decay: float = 0.0
    eps: float = 1e-8
    batch_size: int = 32
    hidden: int = 100
    embed_dim: int = 100
    max_len: int = 200
    space: str = "multimodal"
    depth: int = 5
    k_sample: int = 8
    budget: int = 2
    temperature: float = 0.05
    n_nodes: int = 5
    surrogate_steps: int = 150
    concurrency: str = "sequential"
    threads: int = 1
    threshold: float = 0.5

    # excluded from the hash: they do not change any result
    _UNHASHED = ("threads",)

    def hash(self) -> str:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in self._UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    @classmethod
    def read(cls, path: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        with open(path) as fh:
            parser.read_string("[run]\n" + fh.read())
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for key, raw in parser["run"].items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r} in {path}")
            setattr(cfg, key, _coerce(known[key], raw))
        return cfg


def _coerce(f, raw: str):
    kind = type(f.default)
    return kind(raw) if kind is not str else raw


# data loading

def load_log(cfg: RunConfig) -> ParsedLog:
    """Read ``cfg.data``: a file in the column map's layout, or ``synthetic:bkt`` / ``synthetic:planted``."""
    if cfg.data.startswith("synthetic:"):
        gen = cfg.data.split(":", 1)[1]
        recs = {"bkt": bkt_log, "bkt-shuffled": lambda seed: bkt_log(seed=seed, shuffle_labels=True),
                "planted": planted_log}.get(gen)
        if recs is None:
            raise ConfigurationError(f"unknown synthetic generator {gen!r}")
        records = recs(seed=cfg.seed)
        return ParsedLog(records, {str(k): k for k in sorted({r.skill_id for r in records})})
    if not cfg.data:
        raise ConfigurationError("no data path given")
    with open(cfg.data, newline="") as fh:
        if cfg.column_map == "canonical":
            return read_canonical(fh, missing=cfg.missing)
        return parse_interactions(fh, ColumnMap.load(cfg.column_map), missing=cfg.missing)


def n_skills_of(parsed: ParsedLog) -> int:
    return max((r.skill_id for r in parsed.records), default=-1) + 1


def load_arch(cfg: RunConfig):
    """Architecture for ``cfg.model``: a JSON encoding file, or a search output (best.json)."""
    if cfg.model not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {cfg.model!r}; expected one of {MODEL_KINDS}")
    if cfg.model not in ARCH_KINDS:
        if cfg.arch:
            raise ConfigurationError(f"model kind {cfg.model!r} takes no architecture")
        return None
    if not cfg.arch:
        raise ConfigurationError(f"model kind {cfg.model!r} needs --arch")
    path = cfg.arch
    if not os.path.exists(path):
        shipped = os.path.join(os.path.dirname(__file__), "architectures", f"{path}.json")
        path = shipped if os.path.exists(shipped) else path
    with open(path) as fh:
        obj = json.load(fh)
    if isinstance(obj, dict):
        if obj.get("space") != ARCH_KINDS[cfg.model]:
            raise ConfigurationError(f"search output holds {obj.get('space')} encodings but model "
                                     f"{cfg.model!r} needs {ARCH_KINDS[cfg.model]}")
        obj = obj["best"][0]["encoding"]
    try:
        return parse_encoding(ARCH_KINDS[cfg.model], obj)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"architecture {cfg.arch!r} is not a valid "
                                 f"{ARCH_KINDS[cfg.model]} encoding for {cfg.model!r}: {exc}") from exc


# run directory bookkeeping

class RunDir:
    """Output directory with a persisted config and an incomplete-run marker."""

    def __init__(self, out: str, cfg: RunConfig | None, command: str):
        self.out = out
        os.makedirs(out, exist_ok=True)
        with open(self.path(INCOMPLETE), "w") as fh:
            fh.write(command + "\n")
        self.cfg = cfg
        if cfg is not None:
            cfg.write(self.path("config.ini"))

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def stamp(self, obj: dict) -> dict:
        if self.cfg is not None:
            obj = {"config_hash": self.cfg.hash(), "seed": self.cfg.seed, **obj}
        return obj

    def write_json(self, name: str, obj) -> None:
        tmp = self.path(name + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(self.stamp(obj), fh, indent=2, sort_keys=False)
            fh.write("\n")
        os.replace(tmp, self.path(name))

    def complete(self) -> None:
        os.remove(self.path(INCOMPLETE))


# commands

def cmd_ingest(args, cfg: RunConfig) -> int:
    parsed = load_log(cfg)
    summary = parsed.summary()
    print(f"{'records':>10} {'students':>9} {'skills':>7}")
    print(f"{summary['records']:>10} {summary['students']:>9} {summary['skills']:>7}")
    if args.out:
        run = RunDir(args.out, cfg, "ingest")
        with open(run.path("canonical.tsv"), "w", newline="") as fh:
            write_canonical(parsed.records, fh)
        with open(run.path("skills.json"), "w") as fh:
            json.dump(parsed.skill_vocab, fh, indent=1, sort_keys=True)
        run.write_json("summary.json", summary)
        run.complete()
    return 0


def _fold_run(cfg: RunConfig, encoding, seqs, folds, n_skills: int, fold: int) -> PredictionTrace:
    test_ids = set(folds.members(fold))
    train_seqs = [s for s in seqs if s.student_id not in test_ids]
    test_seqs = [s for s in seqs if s.student_id in test_ids]
    stats = compute_normalization(r for s in train_seqs for r in s.records)
    model = build_model(cfg.model, n_skills, stats.dims(), cfg.hidden, cfg.embed_dim, cfg.seed + fold,
                        encoding, cfg.n_nodes)
    tcfg = TrainConfig(cfg.epochs, cfg.lr, cfg.weight_decay, cfg.eps, cfg.batch_size, seed=cfg.seed + fold)
    train(model, encode_sequences(train_seqs, stats), tcfg)
    trace = predict(model, encode_sequences(test_seqs, stats))
    log.info("fold %d done: %d predictions", fold, len(trace))
    return trace


def cmd_train(args, cfg: RunConfig, command: str = "train") -> int:
    encoding = load_arch(cfg)
    parsed = load_log(cfg)
    seqs = build_sequences(parsed.records, cfg.max_len)
    folds = kfold_split([s.student_id for s in seqs], cfg.folds, cfg.seed)
    n_skills = n_skills_of(parsed)
    run = RunDir(args.out, cfg, command)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            traces = dict(enumerate(pool.map(
                lambda f: _fold_run(cfg, encoding, seqs, folds, n_skills, f), range(cfg.folds))))
    else:
        traces = {f: _fold_run(cfg, encoding, seqs, folds, n_skills, f) for f in range(cfg.folds)}
    for f, t in traces.items():
        with open(run.path(f"trace_fold{f}.tsv"), "w") as fh:
            t.write(fh)
    rep = report(traces, cfg.folds)
    rep.update(model=cfg.model, architecture=None if encoding is None else encoding.to_list(),
               dataset=parsed.summary())
    run.write_json("metrics.json", rep)
    plotting.roc_figure({cfg.model: PredictionTrace.concat(traces.values())}, run.path("roc.png"))
    plotting.fold_metrics_figure({cfg.model: rep}, run.path("folds.png"))
    m = rep["mean"]
    print(f"{cfg.model}: r2={m['r2']:.4f} auc={m['auc']:.4f} wauc={m['wauc']:.4f} ({cfg.folds} folds)")
    run.complete()
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    """Transfer run: train and evaluate a fixed, previously discovered architecture on another dataset."""
    if cfg.model not in ARCH_KINDS:
        raise ConfigurationError("eval transfers a searched architecture; use --model nas-cell, dkt-fs or nas-extend")
    return cmd_train(args, cfg, command="eval")


def cmd_search(args, cfg: RunConfig) -> int:
    parsed = load_log(cfg)
    seqs = build_sequences(parsed.records, cfg.max_len)
    folds = kfold_split([s.student_id for s in seqs], cfg.folds, cfg.seed)
    val_ids = set(folds.members(0))
    train_seqs = [s for s in seqs if s.student_id not in val_ids]
    val_seqs = [s for s in seqs if s.student_id in val_ids]
    stats = compute_normalization(r for s in train_seqs for r in s.records)
    scfg = SearchConfig(space=cfg.space, depth_limit=cfg.depth, k=cfg.k_sample, budget_epochs=cfg.budget,
                        temperature=cfg.temperature, seed=cfg.seed, n_nodes=cfg.n_nodes, hidden=cfg.hidden,
                        embed_dim=cfg.embed_dim, lr=cfg.lr, weight_decay=cfg.weight_decay, eps=cfg.eps,
                        batch_size=cfg.batch_size, surrogate_steps=cfg.surrogate_steps,
                        concurrency=cfg.concurrency, threads=cfg.threads)
    if not args.resume and os.path.exists(os.path.join(args.out, "history.jsonl")):
        raise ConfigurationError(f"{args.out} already holds a search history; pass --resume to continue it")
    run = RunDir(args.out, cfg, "search")
    searcher = SMBOSearch(scfg, encode_sequences(train_seqs, stats), encode_sequences(val_seqs, stats),
                          n_skills_of(parsed), stats.dims(), run.path("history.jsonl"), run.path("search.ckpt"))
    res = searcher.run(resume=args.resume)
    best = [{"encoding": c.encoding.to_list(), "measured": c.measured, "predicted": c.predicted,
             "depth": c.depth} for c in res.best]
    run.write_json("best.json", {"space": cfg.space, "best": best, "evaluations": len(res.history)})
    order = searcher.state.history
    plotting.search_history_figure([c.measured for c in order], run.path("search.png"),
                                   [c.predicted for c in order], [c.depth for c in order])
    for b in best:
        print(f"{b['measured']:.4f}  {json.dumps(b['encoding'])}")
    run.complete()
    return 0


def _read_trace(path: str) -> PredictionTrace:
    with open(path) as fh:
        return PredictionTrace.read(fh)


def cmd_compare(args, cfg: RunConfig) -> int:
    res = mcnemar(_read_trace(args.trace_a), _read_trace(args.trace_b), cfg.threshold, args.corrected)
    print(res.describe())
    if args.out:
        run = RunDir(args.out, None, "compare")
        t = res.table
        run.write_json("compare.json", {"a": t.a, "b": t.b, "c": t.c, "d": t.d, "chi2": res.chi2,
                                        "p": res.p_value, "corrected": res.corrected, "caveat": IID_CAVEAT})
        run.complete()
    return 0


def _run_traces(run_dir: str) -> dict[int, PredictionTrace]:
    out = {}
    for name in sorted(os.listdir(run_dir)):
        if name.startswith("trace_fold") and name.endswith(".tsv"):
            out[int(name[len("trace_fold"):-4])] = _read_trace(os.path.join(run_dir, name))
    return out


def cmd_report(args, cfg: RunConfig) -> int:
    """Table and figures across finished train/eval runs, with McNemar against a baseline run."""
    runs = {}
    for d in args.runs:
        if os.path.exists(os.path.join(d, INCOMPLETE)):
            raise ConfigurationError(f"run {d} is incomplete")
        with open(os.path.join(d, "metrics.json")) as fh:
            meta = json.load(fh)
        runs[os.path.basename(os.path.normpath(d)) or d] = (meta, _run_traces(d))
    base_name = args.baseline or next(iter(runs))
    if base_name not in runs:
        raise ConfigurationError(f"baseline {base_name!r} is not one of {list(runs)}")
    base = runs[base_name][1]
    run = RunDir(args.out, None, "report")
    table, reports = [], {}
    for name, (meta, traces) in runs.items():
        rep = report(traces, len(traces), None if name == base_name else base, cfg.threshold)
        reports[name] = rep
        mc = rep.get("mcnemar", {})
        table.append([name, meta.get("model", ""), rep["mean"]["r2"], rep["mean"]["auc"], rep["mean"]["wauc"],
                      mc.get("chi2"), mc.get("p")])
    with open(run.path("report.tsv"), "w") as fh:
        fh.write("\t".join(("run", "model", "r2", "auc", "wauc", "mcnemar_chi2", "mcnemar_p")) + "\n")
        for row in table:
            fh.write("\t".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
                               for v in row) + "\n")
    run.write_json("report.json", {"baseline": base_name, "runs": reports})
    plotting.fold_metrics_figure(reports, run.path("folds.png"))
    plotting.roc_figure({n: PredictionTrace.concat(t.values()) for n, (_, t) in runs.items()}, run.path("roc.png"))
    print(f"{'run':<16} {'r2':>8} {'auc':>8} {'wauc':>8} {'p(vs ' + base_name + ')':>14}")
    for name, _, r2v, a, w, _, p in table:
        print(f"{name:<16} {r2v:>8.4f} {a:>8.4f} {w:>8.4f} {'' if p is None else f'{p:.3g}':>14}")
    print(f"note: {IID_CAVEAT}")
    run.complete()
    return 0


# argument handling

def _add_run_flags(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="flat key = value file; flags below override it")
    p.add_argument("--data", help="interaction log path, or synthetic:bkt / synthetic:planted")
    p.add_argument("--column-map", dest="column_map", help="shipped map name or JSON path")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--arch", help="architecture JSON file, shipped name, or a search best.json")
    p.add_argument("--out", required=out_required)
    p.add_argument("--threads", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ktnas", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", help="parse a raw log into the canonical format and summarise it")
    _add_run_flags(p, out_required=False)
    p = sub.add_parser("train", help="k-fold train and evaluate one model kind")
    _add_run_flags(p)
    p = sub.add_parser("search", help="architecture search with a shared weight store")
    _add_run_flags(p)
    p.add_argument("--resume", action="store_true")
    p = sub.add_parser("eval", help="train and evaluate a discovered architecture on a (new) dataset")
    _add_run_flags(p)
    p = sub.add_parser("compare", help="McNemar's test on two aligned prediction traces")
    p.add_argument("trace_a")
    p.add_argument("trace_b")
    p.add_argument("--threshold", type=float)
    p.add_argument("--corrected", action="store_true", help="continuity correction")
    p.add_argument("--out")
    p.add_argument("--config")
    p = sub.add_parser("report", help="tables and figures across finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--baseline")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.read(args.config) if getattr(args, "config", None) else RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in known:
            raise ConfigurationError(f"bad --set {item!r}")
        setattr(cfg, key, _coerce(known[key], value.strip()))
    for key in ("data", "column_map", "seed", "folds", "model", "arch", "threads", "threshold"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    return cfg


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "search": cmd_search, "eval": cmd_eval,
            "compare": cmd_compare, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (SchemaError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, TraceAlignmentError, UndefinedMetricError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``sgcl <command> ...``.

Every command takes explicit paths. ``SGCL_SEED`` supplies the default seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .augment import METHODS, AugmentConfig, AugmentStats, apply
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import Metrics, evaluate
from .global_graph import SynonymSampler, UniformSampler, build_global_graph, degree_stats
from .ingest import (
    CACHE_FILE,
    FORMATS,
    SPLIT_DAYS,
    EmptyCorpusError,
    ParseError,
    build_corpus,
    content_hash,
    corpus_stats,
    expand_subsequences,
    file_hash,
    load_corpus,
    parse_fraction,
    read_events,
    save_corpus,
)
from .session_graph import build_session_graph, dump_csv
from .synthetic import SyntheticSpec, synthetic_corpus
from .trainer import fit

log = logging.getLogger("sgcl")

MANIFEST_FILE = "manifest.json"
LOG_FILE = "train_log.csv"
BEST_FILE = "best.ckpt"
METRICS_FILE = "metrics.txt"
EVAL_COLUMNS = ("checkpoint", "k", "p_at_k", "mrr_at_k", "n_examples")
SWEEP_COLUMNS = ("param_value", "p_at_20", "mrr_at_20")
SWEEP_PARAMS = ("lambda", "gamma", "M", "global_context")


class CliError(Exception):
    """User-facing failure; the message says what to fix."""


def _env_seed() -> int:
    raw = os.environ.get("SGCL_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"SGCL_SEED must be an integer, got {raw!r}") from None


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _corpus(path: str):
    d = _existing(path, "corpus directory")
    if not (d / CACHE_FILE).exists():
        raise CliError(f"{d} has no {CACHE_FILE}; run `sgcl preprocess` or `sgcl synth` first")
    return load_corpus(d)


def _parse_items(text: str) -> list[int]:
    try:
        items = [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError:
        raise CliError(f"--session must be comma-separated integers, got {text!r}") from None
    if not items:
        raise CliError("--session is empty")
    if min(items) < 0:
        raise CliError("--session item ids must be non-negative")
    return items


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise CliError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- commands ----------------------------------------------------------------


def cmd_preprocess(args) -> int:
    src = _existing(args.input, "input file")
    fraction = parse_fraction(args.fraction)
    out = Path(args.out)
    key = content_hash(file_hash(src), args.format, repr(fraction), str(args.min_session_len), str(args.min_item_count))
    cache = out / CACHE_FILE
    if cache.exists() and not args.force:
        corpus, _ = load_corpus(out)
        if corpus.meta.get("source_hash") == key:
            print(f"cache up to date: {cache}")
            return 0
    corpus = build_corpus(
        read_events(src, args.format),
        min_session_len=args.min_session_len,
        min_item_count=args.min_item_count,
        split_days=SPLIT_DAYS[args.format],
        fraction=fraction,
    )
    corpus.meta.update(source_hash=key, format=args.format, source=str(src))
    graph = build_global_graph([s.items for s in corpus.train], len(corpus.vocab))
    stats = save_corpus(out, corpus, graph)
    print(stats.to_text(), end="")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_sessions=args.sessions, n_items=args.items, noise=args.noise, seed=args.seed)
    corpus = synthetic_corpus(spec)
    graph = build_global_graph([s.items for s in corpus.train], len(corpus.vocab))
    print(save_corpus(args.out, corpus, graph).to_text(), end="")
    return 0


def cmd_stats(args) -> int:
    corpus, graph = _corpus(args.corpus)
    if args.graph:
        if graph is None:
            graph = build_global_graph([s.items for s in corpus.train], len(corpus.vocab))
        print("degree,count")
        for degree, count in degree_stats(graph).items():
            print(f"{degree},{count}")
        return 0
    stats = corpus_stats(corpus.train, corpus.test, corpus.vocab)
    print(stats.to_text(), end="")
    if args.lengths:
        print(stats.histogram_csv(), end="")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(_existing(args.config, "config file")) if args.config else ExperimentConfig()
    extra = _overrides(args.set or [])
    if args.epochs is not None:
        extra["epochs"] = str(args.epochs)
    cfg = cfg.with_values(extra) if extra else cfg
    return cfg.with_seed(args.seed)


def _test_metrics(params, corpus, k: int) -> Metrics:
    examples = expand_subsequences(corpus.test)
    if not examples:
        raise CliError("corpus has no test examples to evaluate")
    return evaluate(params, examples, k)


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    corpus, _ = _corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "seed": cfg.train.seed,
        "config": cfg.flat(),
        "config_text": cfg.to_text(),
        "corpus": str(Path(args.corpus).resolve()),
        "corpus_hash": file_hash(Path(args.corpus) / CACHE_FILE),
        "argv": list(args.argv),
        "started_at": _now(),
    }
    # the manifest is written once, before training; a resumed run keeps the original
    if not (args.resume and (out / MANIFEST_FILE).exists()):
        (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "run.cfg").write_text(cfg.to_text())
    t0 = time.perf_counter()
    result = fit(corpus, cfg, out_dir=out, resume=args.resume)
    save_checkpoint(out / BEST_FILE, result.params, {"best_epoch": result.best_epoch, "config": cfg.flat()})
    if not result.log:
        print("no epochs run (epochs=0)")
        return 0
    metrics = _test_metrics(result.params, corpus, cfg.train.eval_k)
    line = metrics.line()
    (out / METRICS_FILE).write_text(line + "\n")
    log.info("trained %d epochs in %.1fs", len(result.log), time.perf_counter() - t0)
    print(line)
    return 0


def cmd_eval(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    params, _, _ = load_checkpoint(ckpt)
    corpus, _ = _corpus(args.corpus)
    if params.n_items != len(corpus.vocab):
        raise CliError(
            f"checkpoint has {params.n_items} item rows but the corpus vocabulary has {len(corpus.vocab)}; "
            "evaluate against the corpus it was trained on"
        )
    metrics = _test_metrics(params, corpus, args.k)
    log_path = Path(args.log) if args.log else ckpt.parent / "eval_log.csv"
    fresh = not log_path.exists()
    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(EVAL_COLUMNS)
        writer.writerow([str(ckpt), metrics.k, repr(metrics.p_at_k), repr(metrics.mrr_at_k), metrics.n_examples])
    print(metrics.line())
    return 0


def cmd_augment_demo(args) -> int:
    items = _parse_items(args.session)
    gamma = args.gamma
    cfg = AugmentConfig(**{f"gamma_{m}": gamma for m in METHODS}, max_len=args.max_len)
    if args.corpus:
        corpus, graph = _corpus(args.corpus)
        if graph is None:
            graph = build_global_graph([s.items for s in corpus.train], len(corpus.vocab))
        if max(items) >= graph.total_items:
            raise CliError(f"item {max(items)} is outside the corpus vocabulary (size {graph.total_items})")
    else:
        # without a corpus the session's own transitions act as the global graph
        graph = build_global_graph([items], max(items) + 1)
    sampler = SynonymSampler(graph, args.k) if not args.uniform else UniformSampler(graph.total_items)
    stats = AugmentStats()
    out = apply(args.op, items, cfg, sampler, np.random.default_rng(args.seed), stats)
    print("original:  " + ",".join(map(str, items)))
    print("augmented: " + ",".join(map(str, out)))
    verb = "insert" if args.op == "inject" else "replace"
    for pos, original, synonym in stats.provenance:
        print(f"{verb} pos={pos} anchor={original} synonym={synonym}")
    skipped = stats.isolated_change + stats.isolated_inject
    if skipped:
        print(f"skipped {skipped} position(s) with no synonym")
    return 0


def cmd_session_graph(args) -> int:
    print(dump_csv(build_session_graph(_parse_items(args.session))), end="")
    return 0


def _sweep_values(param: str, raw: Sequence[str]) -> list[str]:
    values = [v.strip() for chunk in raw for v in chunk.split(",") if v.strip()]
    if not values:
        raise CliError("--values is empty")
    if param == "global_context":
        bad = [v for v in values if v.lower() not in ("on", "off", "true", "false", "1", "0")]
        if bad:
            raise CliError(f"global_context values must be on/off, got {bad}")
    return values


def sweep_point(cfg: ExperimentConfig, param: str, value: str) -> ExperimentConfig:
    if param == "lambda":
        return cfg.with_values({"lambda": value})
    if param == "M":
        return cfg.with_values({"n_methods": value})
    if param == "gamma":
        return cfg.with_values({f"gamma_{m}": value for m in METHODS})
    if param == "global_context":
        flag = value.lower() in ("on", "true", "1")
        return replace(cfg, global_context=flag)
    raise CliError(f"unknown sweep parameter {param!r}")


def cmd_sweep(args) -> int:
    base = _experiment_config(args)
    corpus, _ = _corpus(args.corpus)
    rows = []
    for value in _sweep_values(args.param, args.values):
        cfg = sweep_point(base, args.param, value)
        result = fit(corpus, cfg)
        metrics = _test_metrics(result.params, corpus, 20)
        log.info("%s=%s %s", args.param, value, metrics.line())
        rows.append([value, repr(metrics.p_at_k), repr(metrics.mrr_at_k)])
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


# -- parser ------------------------------------------------------------------


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--corpus", required=True, help="directory written by preprocess/synth")
    p.add_argument("--seed", type=int, default=None, help="default: $SGCL_SEED or 0")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("preprocess", help="raw click log -> corpus cache")
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--fraction", default="1", help="most recent share of train sessions: 1, 1/4, 1/64")
    p.add_argument("--in", dest="input", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--min-session-len", type=int, default=2)
    p.add_argument("--min-item-count", type=int, default=5)
    p.add_argument("--force", action="store_true", help="rebuild even if the cache matches")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a synthetic successor-chain corpus")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--sessions", type=int, default=2000)
    p.add_argument("--items", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--graph", action="store_true", help="emit the global-graph degree,count CSV instead")
    p.add_argument("--lengths", action="store_true", help="append the session length histogram CSV")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train and report test metrics")
    _add_training_flags(p)
    p.add_argument("--out", required=True, metavar="DIR", help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--log", help="CSV to append to (default: eval_log.csv next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-demo", help="apply one augmentation to a session")
    p.add_argument("--op", required=True, choices=METHODS)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--session", required=True, help='internal item ids, e.g. "3,9,4,1"')
    p.add_argument("--corpus", metavar="DIR", help="take synonyms from this corpus' global graph")
    p.add_argument("--k", type=float, default=0.75, help="degree damping exponent")
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--uniform", action="store_true", help="replace uniformly instead of by synonym")
    p.set_defaults(func=cmd_augment_demo)

    p = sub.add_parser("session-graph", help="dump A_in/A_out of one session as CSV")
    p.add_argument("--session", required=True)
    p.set_defaults(func=cmd_session_graph)

    p = sub.add_parser("sweep", help="grid over one parameter; CSV of test metrics")
    _add_training_flags(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, nargs="+", help="comma or space separated")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _env_seed()
        return args.func(args)
    except (CliError, ConfigError, ParseError, EmptyCorpusError) as exc:
        print(f"sgcl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"sgcl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

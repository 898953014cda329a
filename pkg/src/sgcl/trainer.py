"""Joint next-item / contrastive training with Adam and step learning-rate decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import augment_batch, select_methods
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, TrainConfig
from .encoder import ModelParams, encode
from .evaluation import Metrics, evaluate
from .global_graph import GlobalGraph, SynonymSampler, UniformSampler, build_global_graph
from .ingest import Corpus, Session, expand_subsequences, truncate_recent
from .objectives import ContrastiveBatch, contrastive_loss, ln_affine, main_loss, predict_next, project, total_loss
from .tensor import Tape

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_main", "loss_cl", "p_at_20", "mrr_at_20", "lr")
_METHOD_TAG = 101
_SHUFFLE_TAG = 202


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
        )


def adam_step(params: ModelParams, state: AdamState, cfg: TrainConfig, epoch: int) -> float:
    """One bias-corrected Adam update from the accumulated ``.grad`` buffers.

    L2 enters as ``grad += l2 * param`` before the moments. Returns the
    learning rate used.
    """
    grads = {}
    for name, t in params.items():
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g + cfg.l2 * t.data if cfg.l2 else g
    lr = cfg.lr_at(epoch)
    state.step += 1
    c1 = 1.0 - cfg.beta1**state.step
    c2 = 1.0 - cfg.beta2**state.step
    for name, t in params.items():
        g = grads[name]
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return lr


def reduce_gradients(parts: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum per-worker gradient dicts in list order (fixed order keeps it reproducible)."""
    out = {name: np.array(g, dtype=np.float64) for name, g in parts[0].items()}
    for part in parts[1:]:
        for name, g in part.items():
            out[name] = out[name] + g
    return out


def make_sampler(graph: GlobalGraph, cfg: ExperimentConfig):
    if cfg.global_context:
        return SynonymSampler(graph, cfg.synonym_k)
    return UniformSampler(graph.total_items)


def batch_losses(
    params: ModelParams,
    anchors: Sequence[Session],
    views: Sequence[Sequence[int]],
    n_methods: int,
    cfg: ExperimentConfig,
):
    """(main, contrastive, total) loss tensors for one prepared batch.

    Anchors and views go through the encoder as one padded batch. Without
    views (lambda = 0) the contrastive term is None and total is main.
    """
    n = len(anchors)
    affine = ln_affine(params)
    if not views:
        r = encode([a.items for a in anchors], params)
        main = main_loss(predict_next(r, params), [a.label for a in anchors], params["item_embeddings"], cfg.loss.tau_main, affine)
        return main, None, main
    r = encode([a.items for a in anchors] + list(views), params)
    t = predict_next(T.row_gather(r, np.arange(n)), params)
    main = main_loss(t, [a.label for a in anchors], params["item_embeddings"], cfg.loss.tau_main, affine)
    z = project(T.row_gather(r, np.arange(n, n + len(views))), params)
    cl = contrastive_loss(ContrastiveBatch(z, n_methods), cfg.loss.tau_cl, cfg.loss.exclude_self, affine)
    return main, cl, total_loss(main, cl, cfg.loss.lam)


def prepare_batch(batch: Sequence[Session], cfg: ExperimentConfig, sampler, epoch: int, index: int):
    """Truncate anchors, draw this batch's methods and build the augmented views.

    Augmentation is skipped entirely when the contrastive weight is 0.
    """
    anchors = [truncate_recent(s, cfg.encoder.max_len) for s in batch]
    if cfg.loss.lam == 0:
        return anchors, [], []
    key = (cfg.train.seed, epoch, index)
    methods = select_methods(cfg.augment, np.random.default_rng([*key, _METHOD_TAG]))
    views = augment_batch([a.items for a in anchors], methods, cfg.augment, sampler, key)
    return anchors, views, methods


@dataclass(frozen=True)
class StepLosses:
    main: float
    cl: float
    total: float


def train_step(
    batch: Sequence[Session],
    params: ModelParams,
    state: AdamState,
    cfg: ExperimentConfig,
    sampler,
    epoch: int = 0,
    index: int = 0,
) -> StepLosses:
    if not batch:
        raise ValueError("empty batch")
    anchors, views, methods = prepare_batch(batch, cfg, sampler, epoch, index)
    with Tape() as tape:
        main, cl, total = batch_losses(params, anchors, views, len(methods), cfg)
    params.zero_grad()
    tape.backward(total)
    adam_step(params, state, cfg.train, epoch)
    return StepLosses(main.item(), math.nan if cl is None else cl.item(), total.item())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_main: float
    loss_cl: float
    p_at_20: float
    mrr_at_20: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.epoch), *(repr(float(x)) for x in (self.loss_main, self.loss_cl, self.p_at_20, self.mrr_at_20, self.lr))]


def write_log_csv(path: str | Path, records: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        writer.writerows(r.row() for r in records)


def read_log_csv(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), *(float(r[c]) for c in LOG_COLUMNS[1:]))
        for r in rows
    ]


def split_validation(sessions: Sequence[Session], fraction: float) -> tuple[list[Session], list[Session]]:
    """Hold out the most recent ``fraction`` of (time-ordered) train sessions."""
    n_val = int(len(sessions) * fraction)
    cut = len(sessions) - n_val
    return list(sessions[:cut]), list(sessions[cut:])


def make_batches(n_examples: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n_examples)
    batches = [order[i : i + batch_size] for i in range(0, n_examples, batch_size)]
    # contrastive loss degenerates on a single example
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


@dataclass
class FitResult:
    params: ModelParams
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    state: AdamState | None = None


def _ckpt_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt"


def fit(
    corpus: Corpus,
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """Train for ``cfg.train.epochs`` epochs and restore the best-MRR parameters.

    With ``out_dir`` every epoch writes a checkpoint (parameters plus
    optimizer state) and rewrites ``train_log.csv``; ``resume`` continues
    from such a checkpoint.
    """
    tc = cfg.train
    train_sessions, val_sessions = split_validation(corpus.train, tc.val_fraction)
    graph = build_global_graph([s.items for s in train_sessions], len(corpus.vocab), cfg.directed_graph)
    sampler = make_sampler(graph, cfg)
    examples = expand_subsequences(train_sessions)
    val_examples = expand_subsequences(val_sessions)

    params = ModelParams.init(len(corpus.vocab), cfg.encoder, seed=tc.seed)
    state = AdamState.zeros(params)
    records: list[EpochRecord] = []
    start, best_epoch, best_mrr, best_state = 0, None, -math.inf, None
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        params, meta, loaded = load_checkpoint(resume)
        state = loaded or AdamState.zeros(params)
        start = meta["epoch"] + 1
        records = [EpochRecord(**r) for r in meta.get("log", [])]
        best_epoch, best_mrr = meta.get("best_epoch"), meta.get("best_mrr", -math.inf)
        if best_epoch is not None:
            best_file = Path(resume).with_name(f"epoch_{best_epoch:03d}.ckpt")
            best_state = load_checkpoint(best_file)[0].state() if best_file.exists() else params.state()
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    for epoch in range(start, tc.epochs):
        batches = make_batches(len(examples), tc.batch_size, np.random.default_rng([tc.seed, epoch, _SHUFFLE_TAG]))
        main_sum = cl_sum = 0.0
        seen = 0
        for index, idx in enumerate(batches):
            losses = train_step([examples[i] for i in idx], params, state, cfg, sampler, epoch, index)
            main_sum += losses.main * len(idx)
            cl_sum += losses.cl * len(idx)
            seen += len(idx)
        metrics = _validate(params, val_examples, tc.eval_k)
        record = EpochRecord(
            epoch=epoch,
            loss_main=main_sum / seen if seen else math.nan,
            loss_cl=cl_sum / seen if seen else math.nan,
            p_at_20=metrics.p_at_k if metrics else math.nan,
            mrr_at_20=metrics.mrr_at_k if metrics else math.nan,
            lr=tc.lr_at(epoch),
        )
        records.append(record)
        score = metrics.mrr_at_k if metrics else float(epoch)
        if score > best_mrr:
            best_epoch, best_mrr, best_state = epoch, score, params.state()
        log.info("epoch %d main=%.5f cl=%.5f val_mrr=%.5f", epoch, record.loss_main, record.loss_cl, record.mrr_at_20)
        if out is not None:
            meta = {
                "epoch": epoch,
                "config": cfg.flat(),
                "log": [r.__dict__ for r in records],
                "best_epoch": best_epoch,
                "best_mrr": best_mrr,
            }
            save_checkpoint(_ckpt_path(out, epoch), params, meta, state)
            write_log_csv(out / "train_log.csv", records)
        if on_epoch is not None:
            on_epoch(record)

    last_state = state
    if best_state is not None:
        params.load_state(best_state)
    return FitResult(params=params, log=records, best_epoch=best_epoch, state=last_state)


def _validate(params: ModelParams, examples: Sequence[Session], k: int) -> Metrics | None:
    return evaluate(params, examples, k) if examples else None

"""Click-stream parsing, corpus construction, statistics and the corpus cache.

Timestamps are integer milliseconds since the Unix epoch. Diginetica rows
carry a calendar date plus an in-session millisecond offset; both are folded
into one sortable integer.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MASK_INDEX = 0
MASK_TOKEN = "[mask]"
DAY_MS = 86_400_000
SPLIT_DAYS = {"yoochoose": 1, "diginetica": 7}
FORMATS = tuple(SPLIT_DAYS)

CACHE_MAGIC = b"SGCL"
CACHE_VERSION = 1
CACHE_FILE = "corpus.bin"
STATS_FILE = "stats.txt"
LENGTHS_FILE = "lengths.csv"
DEGREES_FILE = "degrees.csv"


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyCorpusError(ValueError):
    """Nothing survived filtering."""


@dataclass(frozen=True, slots=True)
class RawEvent:
    session_id: str
    timestamp: int
    item_id: str


@dataclass(frozen=True, slots=True)
class Session:
    items: tuple[int, ...]
    label: int | None = None

    def __len__(self) -> int:
        return len(self.items)


class Vocab:
    """Dense item ids; index 0 is the [mask] token."""

    def __init__(self, external: Sequence[str], counts: Sequence[int]):
        if len(external) != len(counts):
            raise ValueError("one count per external id required")
        self.to_external: list[str] = [MASK_TOKEN, *external]
        self.counts = np.array([0, *counts], dtype=np.int64)
        self.to_internal = {ext: i for i, ext in enumerate(self.to_external) if i != MASK_INDEX}
        if len(self.to_internal) != len(external):
            raise ValueError("duplicate external item ids")

    def __len__(self) -> int:
        return len(self.to_external)

    @property
    def n_items(self) -> int:
        """Real items, excluding the mask token."""
        return len(self.to_external) - 1

    def encode(self, external: str) -> int:
        return self.to_internal[external]

    def decode(self, internal: int) -> str:
        return self.to_external[internal]


@dataclass
class Corpus:
    """Raw (pre-expansion) sessions ordered by end time, oldest first."""

    train: list[Session]
    test: list[Session]
    vocab: Vocab
    train_times: list[int] = field(default_factory=list)
    test_times: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


# -- parsing -----------------------------------------------------------------


def _parse_iso_ms(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    ms = round(dt.timestamp() * 1000)
    if ms < 0:
        raise ValueError(f"timestamp before the epoch: {text}")
    return ms


def _parse_yoochoose(fields: list[str]) -> RawEvent:
    if len(fields) < 3:
        raise ValueError(f"expected session,timestamp,item[,category], got {len(fields)} fields")
    session, stamp, item = (f.strip() for f in fields[:3])
    if not session or not item:
        raise ValueError("empty session or item id")
    return RawEvent(session, _parse_iso_ms(stamp), item)


def _parse_diginetica(fields: list[str]) -> RawEvent:
    if len(fields) != 5:
        raise ValueError(f"expected sessionId;userId;itemId;timeframe;eventdate, got {len(fields)} fields")
    session, _user, item, frame, date = (f.strip() for f in fields)
    if not session or not item:
        raise ValueError("empty session or item id")
    offset = int(frame)
    if offset < 0:
        raise ValueError(f"negative timeframe {offset}")
    return RawEvent(session, _parse_iso_ms(date) + offset, item)


def _open_text(stream) -> io.TextIOBase:
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    raw: BinaryIO = stream
    head = raw.peek(2)[:2] if hasattr(raw, "peek") else None
    if head is None:
        data = raw.read()
        raw = io.BytesIO(data)
        head = data[:2]
    if head == b"\x1f\x8b":
        raw = gzip.GzipFile(fileobj=raw)
    return io.TextIOWrapper(raw, encoding="utf-8", newline="")


def parse_events(stream, fmt: str) -> list[RawEvent]:
    """Parse a (possibly gzipped) click log into events in file order."""
    if fmt == "yoochoose":
        sep, parse = ",", _parse_yoochoose
    elif fmt == "diginetica":
        sep, parse = ";", _parse_diginetica
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    events = []
    for line_no, line in enumerate(_open_text(stream), start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        if line_no == 1 and line.lower().startswith("sessionid"):
            continue
        try:
            events.append(parse(line.split(sep)))
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from None
    return events


def read_events(path: str | Path, fmt: str) -> list[RawEvent]:
    with open(path, "rb") as fh:
        return parse_events(fh, fmt)


# -- corpus construction -----------------------------------------------------


def _session_key(sid: str):
    return (0, int(sid), "") if sid.isdigit() else (1, 0, sid)


def group_sessions(events: Iterable[RawEvent]) -> list[tuple[str, list[str], int]]:
    """(session_id, items by time, end time) sorted by session id."""
    clicks: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, ev in enumerate(events):
        clicks[ev.session_id].append((ev.timestamp, order, ev.item_id))
    out = []
    for sid in sorted(clicks, key=_session_key):
        rows = sorted(clicks[sid])
        out.append((sid, [item for _, _, item in rows], rows[-1][0]))
    return out


def filter_train(
    sessions: list[tuple[str, list[str], int]], min_session_len: int, min_item_count: int
) -> list[tuple[str, list[str], int]]:
    """Drop rare items and short sessions, repeated until nothing changes."""
    while True:
        counts = Counter(item for _, items, _ in sessions for item in items)
        kept = []
        changed = False
        for sid, items, end in sessions:
            items2 = [i for i in items if counts[i] >= min_item_count]
            changed |= len(items2) != len(items)
            if len(items2) >= min_session_len:
                kept.append((sid, items2, end))
            else:
                changed = True
        sessions = kept
        if not changed:
            return sessions


def build_corpus(
    events: Sequence[RawEvent],
    min_session_len: int = 2,
    min_item_count: int = 5,
    split_days: int = 1,
    fraction: float = 1.0,
) -> Corpus:
    """Group, filter and split events into train/test sessions.

    Test sessions are those ending on the last ``split_days`` calendar days
    (UTC). ``fraction`` keeps only the most recent share of train sessions.
    """
    if not events:
        raise EmptyCorpusError("no events to build a corpus from")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    sessions = [s for s in group_sessions(events) if len(s[1]) >= min_session_len]
    if not sessions:
        raise EmptyCorpusError("every session is shorter than min_session_len")
    last_day = max(end for _, _, end in sessions) // DAY_MS
    split_at = (last_day - split_days + 1) * DAY_MS
    by_time = lambda s: (s[2], _session_key(s[0]))  # noqa: E731
    train = sorted((s for s in sessions if s[2] < split_at), key=by_time)
    test = sorted((s for s in sessions if s[2] >= split_at), key=by_time)
    if fraction < 1.0:
        train = train[len(train) - max(1, int(len(train) * fraction)) :]
    train = filter_train(train, min_session_len, min_item_count)
    if not train:
        raise EmptyCorpusError("no train sessions survive filtering")

    first_seen: dict[str, int] = {}
    counts: Counter = Counter()
    for _, items, _ in train:
        for item in items:
            first_seen.setdefault(item, len(first_seen))
            counts[item] += 1
    external = list(first_seen)
    vocab = Vocab(external, [counts[e] for e in external])

    test_kept = []
    for sid, items, end in test:
        items2 = [vocab.to_internal[i] for i in items if i in vocab.to_internal]
        if len(items2) >= min_session_len:
            test_kept.append((items2, end))
    return Corpus(
        train=[Session(tuple(vocab.to_internal[i] for i in items)) for _, items, _ in train],
        test=[Session(tuple(items)) for items, _ in test_kept],
        vocab=vocab,
        train_times=[end for _, _, end in train],
        test_times=[end for _, end in test_kept],
        meta={
            "min_session_len": min_session_len,
            "min_item_count": min_item_count,
            "split_days": split_days,
            "fraction": fraction,
        },
    )


def expand_subsequences(sessions: Iterable[Session]) -> list[Session]:
    """Every proper prefix labelled with the click that follows it."""
    out = []
    for s in sessions:
        if len(s.items) < 2:
            raise ValueError(f"cannot expand a session of length {len(s.items)}")
        out.extend(Session(s.items[:k], s.items[k]) for k in range(1, len(s.items)))
    return out


def truncate_recent(session: Session, max_len: int = 10) -> Session:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if len(session.items) <= max_len:
        return session
    return Session(session.items[-max_len:], session.label)


# -- statistics --------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    n_clicks: int
    n_train_sessions: int
    n_test_sessions: int
    n_train_examples: int
    n_test_examples: int
    n_items: int
    avg_session_length: float  # mean prefix length over expanded train+test examples
    avg_raw_session_length: float
    length_histogram: dict[int, int]  # raw session length -> count, train+test

    def to_text(self) -> str:
        rows = [
            ("n_clicks", self.n_clicks),
            ("n_train_sessions", self.n_train_sessions),
            ("n_test_sessions", self.n_test_sessions),
            ("n_train_examples", self.n_train_examples),
            ("n_test_examples", self.n_test_examples),
            ("n_items", self.n_items),
            ("avg_session_length", f"{self.avg_session_length:.6f}"),
            ("avg_raw_session_length", f"{self.avg_raw_session_length:.6f}"),
            ("short_session_ratio", f"{short_session_ratio(self.length_histogram):.6f}"),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)

    def histogram_csv(self) -> str:
        return "length,count\n" + "".join(f"{k},{v}\n" for k, v in sorted(self.length_histogram.items()))


def short_session_ratio(histogram: dict[int, int], max_len: int = 3) -> float:
    """Share of sessions with length <= ``max_len``."""
    total = sum(histogram.values())
    return sum(v for k, v in histogram.items() if k <= max_len) / total if total else 0.0


def corpus_stats(train: Sequence[Session], test: Sequence[Session], vocab: Vocab) -> CorpusStats:
    lengths = [len(s.items) for s in (*train, *test)]
    n_examples = sum(n - 1 for n in lengths)
    prefix_total = sum(n * (n - 1) // 2 for n in lengths)
    return CorpusStats(
        n_clicks=sum(lengths),
        n_train_sessions=len(train),
        n_test_sessions=len(test),
        n_train_examples=sum(len(s.items) - 1 for s in train),
        n_test_examples=sum(len(s.items) - 1 for s in test),
        n_items=vocab.n_items,
        avg_session_length=prefix_total / n_examples if n_examples else 0.0,
        avg_raw_session_length=sum(lengths) / len(lengths) if lengths else 0.0,
        length_histogram=dict(sorted(Counter(lengths).items())),
    )


# -- binary cache ------------------------------------------------------------

_DTYPES = {1: np.int64, 2: np.int32, 3: np.uint8}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    fh.write(struct.pack("<BQ", _CODES[arr.dtype], arr.size))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_array(fh) -> np.ndarray:
    code, size = struct.unpack("<BQ", fh.read(9))
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    return np.frombuffer(fh.read(size * dtype.itemsize), dtype=dtype).astype(_DTYPES[code])


def _bytes_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def _pack_sessions(sessions: Sequence[Session]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s.items) for s in sessions], dtype=np.int32)
    flat = np.array([i for s in sessions for i in s.items], dtype=np.int32)
    return lengths, flat


def _unpack_sessions(lengths: np.ndarray, flat: np.ndarray) -> list[Session]:
    if not len(lengths):
        return []
    parts = np.split(flat, np.cumsum(lengths)[:-1])
    return [Session(tuple(part.tolist())) for part in parts]


def write_corpus_cache(path: str | Path, corpus: Corpus, graph=None) -> None:
    """Versioned binary dump: magic, u16 version, then length-prefixed arrays."""
    header = json.dumps(corpus.meta, sort_keys=True)
    train_len, train_flat = _pack_sessions(corpus.train)
    test_len, test_flat = _pack_sessions(corpus.test)
    arrays = [
        _bytes_array(header),
        _bytes_array("\n".join(corpus.vocab.to_external[1:])),
        corpus.vocab.counts[1:].astype(np.int64),
        train_len, train_flat, np.array(corpus.train_times, dtype=np.int64),
        test_len, test_flat, np.array(corpus.test_times, dtype=np.int64),
    ]  # fmt: skip
    if graph is not None:
        offsets = [0]
        nbr, cnt = [], []
        for item in range(graph.total_items):
            for n, c in graph.neighbors.get(item, ()):
                nbr.append(n)
                cnt.append(c)
            offsets.append(len(nbr))
        arrays += [
            np.array(offsets, dtype=np.int64),
            np.array(nbr, dtype=np.int64),
            np.array(cnt, dtype=np.int64),
            np.array([int(graph.directed)], dtype=np.uint8),
        ]
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<HI", CACHE_VERSION, len(arrays)))
        for arr in arrays:
            _write_array(fh, arr)


def read_corpus_cache(path: str | Path):
    """Load ``(corpus, graph_or_None)`` written by :func:`write_corpus_cache`."""
    from .global_graph import GlobalGraph

    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise ValueError(f"{path}: not a corpus cache (bad magic)")
        version, n_arrays = struct.unpack("<HI", fh.read(6))
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        arrays = [_read_array(fh) for _ in range(n_arrays)]
    meta = json.loads(arrays[0].tobytes().decode("utf-8"))
    names = arrays[1].tobytes().decode("utf-8")
    external = names.split("\n") if names else []
    vocab = Vocab(external, arrays[2].tolist())
    corpus = Corpus(
        train=_unpack_sessions(arrays[3], arrays[4]),
        test=_unpack_sessions(arrays[6], arrays[7]),
        vocab=vocab,
        train_times=arrays[5].tolist(),
        test_times=arrays[8].tolist(),
        meta=meta,
    )
    graph = None
    if n_arrays >= 13:
        offsets, nbr, cnt, directed = arrays[9:13]
        neighbors = {}
        for item in range(len(offsets) - 1):
            lo, hi = offsets[item], offsets[item + 1]
            if hi > lo:
                neighbors[item] = tuple(zip(nbr[lo:hi].tolist(), cnt[lo:hi].tolist()))
        graph = GlobalGraph(neighbors, len(offsets) - 1, bool(directed[0]))
    return corpus, graph


def content_hash(*parts: bytes | str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8") if isinstance(part, str) else part)
        h.update(b"\0")
    return h.hexdigest()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_corpus(out_dir: str | Path, corpus: Corpus, graph=None) -> CorpusStats:
    """Write cache plus the ``key=value`` stats and histogram sidecars."""
    from .global_graph import degree_stats

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus_cache(out / CACHE_FILE, corpus, graph)
    stats = corpus_stats(corpus.train, corpus.test, corpus.vocab)
    (out / STATS_FILE).write_text(stats.to_text())
    (out / LENGTHS_FILE).write_text(stats.histogram_csv())
    if graph is not None:
        hist = degree_stats(graph)
        (out / DEGREES_FILE).write_text("degree,count\n" + "".join(f"{k},{v}\n" for k, v in hist.items()))
    return stats


def load_corpus(corpus_dir: str | Path):
    return read_corpus_cache(Path(corpus_dir) / CACHE_FILE)


def parse_fraction(text: str) -> float:
    """Accept ``1``, ``1/4``, ``1/64`` or a decimal."""
    if "/" in text:
        num, den = text.split("/", 1)
        value = int(num) / int(den)
    else:
        value = float(text)
    if not 0.0 < value <= 1.0 or math.isnan(value):
        raise ValueError(f"fraction must lie in (0, 1], got {text}")
    return value

"""Click-log ingestion, filtering/splitting/augmentation, batching and synthetic data."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .optim import make_rng

log = logging.getLogger(__name__)

Pair = tuple[list[int], int]


class DataFormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass
class SessionRecord:
    session_id: str
    events: list[tuple[str, int]]

    @property
    def items(self) -> list[str]:
        return [item for item, _ in self.events]

    @property
    def last_timestamp(self) -> int:
        return self.events[-1][1]


@dataclass
class PreparedDataset:
    vocab: list[str]
    train_pairs: list[Pair]
    valid_pairs: list[Pair]
    test_pairs: list[Pair]
    stats: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.vocab)

    @property
    def item_index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.vocab)}

    def split(self, name: str) -> list[Pair]:
        try:
            return {"train": self.train_pairs, "valid": self.valid_pairs, "test": self.test_pairs}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


@dataclass
class Batch:
    sequences: np.ndarray  # (B, max_len), padded with pad_index
    lengths: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    pad_index: int

    def __len__(self) -> int:
        return len(self.labels)


# -- ingestion ----------------------------------------------------------

def ingest(path) -> list[SessionRecord]:
    """Parse ``session_id<TAB>item_id<TAB>timestamp`` lines.

    Records keep the order in which sessions first appear; events are sorted by
    timestamp with ties kept in file order.
    """
    sessions: dict[str, list[tuple[int, int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataFormatError(f"line {lineno}: expected 3 tab-separated columns, got {len(cols)}")
            sid, item, ts = cols
            try:
                stamp = int(ts)
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise DataFormatError(f"line {lineno}: timestamp {ts!r} is not an integer") from None
            if not sid or not item:
                raise DataFormatError(f"line {lineno}: empty session or item id")
            sessions.setdefault(sid, []).append((stamp, lineno, item))
    return [
        SessionRecord(sid, [(item, stamp) for stamp, _, item in sorted(evts)])
        for sid, evts in sessions.items()
    ]


def write_events(records: Sequence[SessionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("session_id\titem_id\ttimestamp\n")
        for rec in records:
            for item, ts in rec.events:
                fh.write(f"{rec.session_id}\t{item}\t{ts}\n")


# -- preprocessing ------------------------------------------------------

def filter_records(records: Sequence[SessionRecord], min_item_freq: int = 5,
                   min_session_len: int = 2) -> list[SessionRecord]:
    """Drop rare items then short sessions, repeated until nothing changes."""
    current = [SessionRecord(r.session_id, list(r.events)) for r in records]
    while True:
        counts = Counter(item for r in current for item, _ in r.events)
        filtered = []
        for r in current:
            events = [e for e in r.events if counts[e[0]] >= min_item_freq]
            if len(events) >= min_session_len:
                filtered.append(SessionRecord(r.session_id, events))
        if filtered == current:
            return filtered
        current = filtered


def threshold_for_last_fraction(records: Sequence[SessionRecord], fraction: float) -> int:
    """Timestamp such that sessions ending at or after it span the last ``fraction`` of time."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    stamps = [ts for r in records for _, ts in r.events]
    if not stamps:
        raise EmptyDatasetError("no events to split")
    lo, hi = min(stamps), max(stamps)
    return int(np.ceil(hi - fraction * (hi - lo)))


def augment(sequence: Sequence[int], max_len: int | None = None) -> list[Pair]:
    """Prefix pairs ([v1], v2), ([v1, v2], v3), ... of one session."""
    pairs = []
    for end in range(1, len(sequence)):
        prefix = list(sequence[:end])
        if max_len is not None and len(prefix) > max_len:
            prefix = prefix[-max_len:]
        pairs.append((prefix, sequence[end]))
    return pairs


def preprocess(
    records: Sequence[SessionRecord],
    test_threshold: int,
    min_item_freq: int = 5,
    min_session_len: int = 2,
    valid_fraction: float = 0.1,
    max_len: int = 30,
    seed: int = 0,
) -> PreparedDataset:
    survivors = filter_records(records, min_item_freq, min_session_len)
    if not survivors:
        raise EmptyDatasetError("every session was filtered out")
    train_sessions = [r for r in survivors if r.last_timestamp < test_threshold]
    test_sessions = [r for r in survivors if r.last_timestamp >= test_threshold]
    if not train_sessions:
        raise EmptyDatasetError("no training sessions before the test threshold")

    vocab: list[str] = []
    index: dict[str, int] = {}
    for r in train_sessions:
        for item in r.items:
            if item not in index:
                index[item] = len(vocab)
                vocab.append(item)

    train_all: list[Pair] = []
    for r in train_sessions:
        train_all.extend(augment([index[i] for i in r.items], max_len))

    test_pairs: list[Pair] = []
    n_test_sessions = 0
    for r in test_sessions:
        raw_pairs = augment(r.items, max_len)
        kept = [
            ([index[i] for i in seq], index[label])
            for seq, label in raw_pairs
            if label in index and all(i in index for i in seq)
        ]
        if kept:
            n_test_sessions += 1
        test_pairs.extend(kept)

    rng = make_rng(seed, "valid_split")
    n_valid = int(round(valid_fraction * len(train_all)))
    valid_idx = set(rng.choice(len(train_all), size=n_valid, replace=False).tolist()) if n_valid else set()
    train_pairs = [p for i, p in enumerate(train_all) if i not in valid_idx]
    valid_pairs = [p for i, p in enumerate(train_all) if i in valid_idx]

    lengths = [len(r.events) for r in survivors]
    stats = {
        "clicks": int(sum(lengths)),
        "training_sessions": len(train_sessions),
        "test_sessions": n_test_sessions,
        "items": len(vocab),
        "avg_length": round(float(np.mean(lengths)), 4),
        "max_length": int(max(lengths)),
        "train_pairs": len(train_pairs),
        "valid_pairs": len(valid_pairs),
        "test_pairs": len(test_pairs),
        "test_threshold": int(test_threshold),
    }
    return PreparedDataset(vocab, train_pairs, valid_pairs, test_pairs, stats)


# -- persistence --------------------------------------------------------

def _write_pairs(pairs: Sequence[Pair], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq, label in pairs:
            fh.write(" ".join(str(i) for i in [*seq, label]) + "\n")


def _read_pairs(path: Path) -> list[Pair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 2:
                raise DataFormatError(f"{path.name} line {lineno}: need a sequence and a label")
            ids = [int(t) for t in tokens]
            pairs.append((ids[:-1], ids[-1]))
    return pairs


def save_dataset(ds: PreparedDataset, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "vocab.tsv", "w", encoding="utf-8") as fh:
        for i, item in enumerate(ds.vocab):
            fh.write(f"{i}\t{item}\n")
    _write_pairs(ds.train_pairs, out / "train.txt")
    _write_pairs(ds.valid_pairs, out / "valid.txt")
    _write_pairs(ds.test_pairs, out / "test.txt")
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(ds.stats, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> PreparedDataset:
    src = Path(directory)
    if not (src / "vocab.tsv").exists():
        raise FileNotFoundError(f"{src} is not a prepared dataset (no vocab.tsv)")
    vocab = []
    with open(src / "vocab.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            idx, item = line.rstrip("\n").split("\t")
            if int(idx) != len(vocab):
                raise DataFormatError(f"vocab.tsv line {lineno}: indices must be contiguous")
            vocab.append(item)
    stats = json.loads((src / "stats.json").read_text()) if (src / "stats.json").exists() else {}
    return PreparedDataset(
        vocab,
        _read_pairs(src / "train.txt"),
        _read_pairs(src / "valid.txt"),
        _read_pairs(src / "test.txt"),
        stats,
    )


# -- batching -----------------------------------------------------------

def make_batches(pairs: Sequence[Pair], batch_size: int, pad_index: int,
                 rng: np.random.Generator | None = None, shuffle: bool = False) -> list[Batch]:
    if not pairs:
        raise ValueError("cannot batch an empty pair list")
    order = np.arange(len(pairs))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True needs an rng")
        order = rng.permutation(len(pairs))
    batches = []
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        lengths = np.array([len(seq) for seq, _ in chunk], dtype=np.int64)
        width = int(lengths.max())
        seqs = np.full((len(chunk), width), pad_index, dtype=np.int64)
        for row, (seq, _) in enumerate(chunk):
            seqs[row, :len(seq)] = seq
        mask = np.arange(width)[None, :] < lengths[:, None]
        labels = np.array([label for _, label in chunk], dtype=np.int64)
        batches.append(Batch(seqs, lengths, labels, mask, pad_index))
    return batches


# -- synthetic data -----------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 50
    n_factors: int = 4
    n_sessions: int = 400
    min_len: int = 4
    max_len: int = 10
    noise: float = 0.2
    n_clusters: int = 5
    seed: int = 7


def synth_item_factors(n_items: int, n_factors: int, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """(n_items, n_factors) matrix; entry f is the item's cluster on latent factor f.

    Clusters are balanced within each factor and drawn independently across factors.
    """
    return np.stack(
        [rng.permutation(np.arange(n_items) % n_clusters) for _ in range(n_factors)], axis=1
    )


def synth_generate(n_items: int = 50, n_factors: int = 4, n_sessions: int = 400,
                   session_len_range: tuple[int, int] = (4, 10), noise: float = 0.2,
                   rng: np.random.Generator | None = None, n_clusters: int = 5,
                   return_factors: bool = False):
    """Sessions with planted factor structure.

    Each session draws a factor of interest and a starting item; every further
    click stays in the starting item's cluster on that factor, except that with
    probability ``noise`` it is a uniformly random item instead.
    """
    if n_items < n_factors:
        raise ValueError("n_items must be >= n_factors")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(7)
    n_clusters = max(1, min(n_clusters, n_items))
    factors = synth_item_factors(n_items, n_factors, n_clusters, rng)
    lo, hi = session_len_range
    records = []
    for s in range(n_sessions):
        f = int(rng.integers(n_factors))
        length = int(rng.integers(lo, hi + 1))
        current = int(rng.integers(n_items))
        cluster = factors[current, f]
        members = np.flatnonzero(factors[:, f] == cluster)
        items = [current]
        for _ in range(length - 1):
            if rng.random() < noise:
                current = int(rng.integers(n_items))
            else:
                choices = members[members != current]
                if choices.size == 0:
                    choices = members
                current = int(rng.choice(choices))
            items.append(current)
        start = 1_000_000 + 600 * s
        records.append(SessionRecord(f"s{s:05d}", [(f"i{i:04d}", start + 10 * j) for j, i in enumerate(items)]))
    if return_factors:
        return records, factors
    return records

"""Event ingestion, preprocessing, sequence splitting and synthetic data."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DatasetError, IngestionError
from .graph import AttributeRecords

logger = logging.getLogger(__name__)

BUNDLE_FILE_VERSION = 1

_DAY_MS = 86_400_000
# Default test windows for the public benchmarks, measured back from the last event.
TEST_WINDOWS_MS = {"dressipi": 30 * _DAY_MS, "diginetica": 7 * _DAY_MS, "retailrocket": 2 * _DAY_MS}


class RawEvent(NamedTuple):
    session_id: int
    timestamp: int
    item_id: int


@dataclass(frozen=True)
class SessionExample:
    prefix: tuple[int, ...]
    target: int
    origin_session: int
    split: str = "train"


@dataclass
class DatasetBundle:
    train: list[SessionExample]
    test: list[SessionExample]
    item_map: np.ndarray          # new id -> original id
    attributes: AttributeRecords
    stats: dict = field(default_factory=dict)

    @property
    def num_items(self) -> int:
        return len(self.item_map)

    def train_item_counts(self) -> np.ndarray:
        """Interactions per item over the (deduplicated) training sessions."""
        counts = np.zeros(self.num_items, dtype=np.int64)
        for seq in full_sessions(self.train).values():
            np.add.at(counts, np.asarray(seq), 1)
        return counts


def full_sessions(examples: Iterable[SessionExample]) -> dict[int, tuple[int, ...]]:
    """Recover each origin session from its longest split example."""
    out: dict[int, tuple[int, ...]] = {}
    for ex in examples:
        seq = ex.prefix + (ex.target,)
        if len(seq) > len(out.get(ex.origin_session, ())):
            out[ex.origin_session] = seq
    return out


# -- files ---------------------------------------------------------------------------
def load_events(path: str | Path) -> list[RawEvent]:
    """Read ``session_id<TAB>timestamp_ms<TAB>item_id`` lines, sorted by session then time."""
    events: list[RawEvent] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestionError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                events.append(RawEvent(int(parts[0]), int(parts[1]), int(parts[2])))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: non-integer field") from exc
    events.sort(key=lambda e: (e.session_id, e.timestamp))
    return events


def write_events(path: str | Path, events: Iterable[RawEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# session_id\ttimestamp_ms\titem_id\n")
        for e in events:
            fh.write(f"{e.session_id}\t{e.timestamp}\t{e.item_id}\n")


# -- preprocessing --------------------------------------------------------------------
def split_sequence(seq: Sequence[int], origin: int, split: str) -> list[SessionExample]:
    """``[a, b, c]`` -> ``([a], b), ([a, b], c)``."""
    seq = tuple(int(x) for x in seq)
    return [SessionExample(seq[:i], seq[i], origin, split) for i in range(1, len(seq))]


def _segment(events: Sequence[RawEvent], gap_minutes: float | None) -> list[tuple[int, list[int], list[int]]]:
    by_session: dict[int, list[RawEvent]] = defaultdict(list)
    for e in events:
        by_session[e.session_id].append(e)
    sessions = []
    gap_ms = None if gap_minutes is None else gap_minutes * 60_000
    for sid in sorted(by_session):
        evs = sorted(by_session[sid], key=lambda e: e.timestamp)
        items, times = [evs[0].item_id], [evs[0].timestamp]
        for prev, e in zip(evs, evs[1:]):
            if gap_ms is not None and e.timestamp - prev.timestamp > gap_ms:
                sessions.append((len(sessions), items, times))
                items, times = [], []
            items.append(e.item_id)
            times.append(e.timestamp)
        sessions.append((len(sessions), items, times))
    return sessions


def filter_sessions(sessions: dict[int, list[int]], min_item_count: int) -> dict[int, list[int]]:
    """Drop rare items and length-1 sessions until both conditions hold."""
    current = {sid: list(seq) for sid, seq in sessions.items()}
    while True:
        counts = Counter(x for seq in current.values() for x in seq)
        rare = {x for x, c in counts.items() if c < min_item_count}
        changed = False
        nxt = {}
        for sid, seq in current.items():
            kept = [x for x in seq if x not in rare] if rare else seq
            if len(kept) != len(seq):
                changed = True
            if len(kept) >= 2:
                nxt[sid] = kept
            else:
                changed = True
        current = nxt
        if not changed:
            return current


def preprocess(events: Sequence[RawEvent], min_item_count: int = 5, session_gap_minutes: float | None = None,
               test_window_ms: int | None = None, test_fraction: float = 0.1,
               attributes: AttributeRecords | None = None) -> DatasetBundle:
    """Filter, split by time, remap ids and expand sessions into examples.

    A session's time is its last timestamp. With ``test_window_ms`` the test
    set is every session ending after ``max_time - test_window_ms``;
    otherwise the latest ``test_fraction`` of sessions (cut at a timestamp
    boundary so test sessions are strictly later than training ones).
    """
    segmented = _segment(events, session_gap_minutes)
    end_time = {sid: times[-1] for sid, _, times in segmented}
    kept = filter_sessions({sid: items for sid, items, _ in segmented}, min_item_count)
    if not kept:
        raise DatasetError("no sessions survive filtering")

    order = sorted(kept, key=lambda s: (end_time[s], s))
    if test_window_ms is not None:
        cutoff = max(end_time[s] for s in order) - test_window_ms
    else:
        n_train = len(order) - max(1, int(math.ceil(test_fraction * len(order))))
        if n_train <= 0:
            raise DatasetError("test split would leave no training sessions")
        cutoff = end_time[order[n_train - 1]]
    train_ids = [s for s in order if end_time[s] <= cutoff]
    test_ids = [s for s in order if end_time[s] > cutoff]
    if not train_ids:
        raise DatasetError("no training sessions before the temporal cutoff")

    vocab = sorted({x for s in train_ids for x in kept[s]})
    remap = {orig: new for new, orig in enumerate(vocab)}
    train: list[SessionExample] = []
    for s in train_ids:
        train.extend(split_sequence([remap[x] for x in kept[s]], s, "train"))
    test: list[SessionExample] = []
    cold = 0
    for s in test_ids:
        seq = [remap[x] for x in kept[s] if x in remap]
        cold += len(kept[s]) - len(seq)
        if len(seq) >= 2:
            test.extend(split_sequence(seq, s, "test"))
    if cold:
        logger.info("dropped %d test interactions with items unseen in training", cold)
    if not test:
        raise DatasetError("no test examples after the temporal split")

    records = remap_attributes(attributes, remap, len(vocab))
    bundle = DatasetBundle(train, test, np.array(vocab, dtype=np.int64), records)
    bundle.stats = summarize(bundle, train_ids, test_ids, kept)
    return bundle


def remap_attributes(attributes: AttributeRecords | None, remap: dict[int, int], num_items: int) -> AttributeRecords:
    if attributes is None:
        return AttributeRecords(np.zeros((0, 3), dtype=np.int64), num_items, 0, 0)
    t = attributes.triples
    keep = np.array([int(i) in remap for i in t[:, 0]], dtype=bool) if len(t) else np.zeros(0, dtype=bool)
    dropped = int((~keep).sum())
    if dropped:
        logger.info("discarded %d attribute triples of filtered-out items", dropped)
    kept = t[keep].copy()
    if len(kept):
        kept[:, 0] = [remap[int(i)] for i in kept[:, 0]]
    return AttributeRecords(kept, num_items, attributes.num_parents, attributes.num_leaves)


def summarize(bundle: DatasetBundle, train_ids, test_ids, sessions) -> dict:
    lengths = [len(sessions[s]) for s in list(train_ids) + list(test_ids)]
    return {
        "train_sessions": len(bundle.train),
        "test_sessions": len(bundle.test),
        "train_origin_sessions": len(train_ids),
        "test_origin_sessions": len(test_ids),
        "items": bundle.num_items,
        "parent_attrs": bundle.attributes.num_parents,
        "leaf_attrs": bundle.attributes.num_leaves,
        "avg_len": float(np.mean(lengths)) if lengths else 0.0,
    }


def subsample_train(bundle: DatasetBundle, fraction: float, seed: int) -> DatasetBundle:
    """Keep a uniform random ``fraction`` of training origin sessions."""
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return bundle
    origins = np.array(sorted({ex.origin_session for ex in bundle.train}), dtype=np.int64)
    k = int(round(fraction * len(origins)))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(origins, size=k, replace=False).tolist())
    train = [ex for ex in bundle.train if ex.origin_session in chosen]
    stats = dict(bundle.stats, train_sessions=len(train), train_origin_sessions=k, train_fraction=fraction)
    return replace(bundle, train=train, stats=stats)


# -- bundle cache ------------------------------------------------------------------------
def _pack(examples: Sequence[SessionExample]) -> dict[str, np.ndarray]:
    lengths = np.array([len(ex.prefix) for ex in examples], dtype=np.int64)
    flat = np.array([x for ex in examples for x in ex.prefix], dtype=np.int64)
    return {
        "offsets": np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
        "items": flat,
        "targets": np.array([ex.target for ex in examples], dtype=np.int64),
        "origins": np.array([ex.origin_session for ex in examples], dtype=np.int64),
    }


def _unpack(z, prefix: str, split: str) -> list[SessionExample]:
    off, items = z[f"{prefix}_offsets"], z[f"{prefix}_items"]
    targets, origins = z[f"{prefix}_targets"], z[f"{prefix}_origins"]
    return [SessionExample(tuple(int(x) for x in items[off[i]:off[i + 1]]), int(targets[i]), int(origins[i]), split)
            for i in range(len(targets))]


def save_bundle(path: str | Path, bundle: DatasetBundle) -> None:
    arrays = {"version": np.array([BUNDLE_FILE_VERSION], dtype=np.int64),
              "item_map": bundle.item_map,
              "attr_triples": bundle.attributes.triples,
              "attr_sizes": np.array([bundle.attributes.num_items, bundle.attributes.num_parents,
                                      bundle.attributes.num_leaves], dtype=np.int64),
              "stats": np.array(json.dumps(bundle.stats, sort_keys=True))}
    for name, examples in (("train", bundle.train), ("test", bundle.test)):
        arrays.update({f"{name}_{k}": v for k, v in _pack(examples).items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_bundle(path: str | Path) -> DatasetBundle:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"][0])
        if version != BUNDLE_FILE_VERSION:
            raise IngestionError(f"unsupported bundle version {version}")
        sizes = [int(x) for x in z["attr_sizes"]]
        records = AttributeRecords(np.array(z["attr_triples"]), *sizes)
        return DatasetBundle(_unpack(z, "train", "train"), _unpack(z, "test", "test"),
                             np.array(z["item_map"]), records, json.loads(str(z["stats"])))


# -- synthetic data ---------------------------------------------------------------------------
def synth_generate(num_items: int, num_parents: int, num_leaves: int, num_sessions: int, coherence: float,
                   seed: int, mean_length: float = 5.0) -> tuple[list[RawEvent], AttributeRecords]:
    """Random-walk sessions over a catalog with planted attribute structure.

    Leaf ``a`` belongs to parent ``a % num_parents``; every item gets one
    leaf uniformly at random (and that leaf's parent). Each next click is,
    with probability ``coherence``, drawn from the items sharing the current
    item's leaf, otherwise from the whole catalog. Session lengths are
    ``2 + Poisson(mean_length - 2)``.
    """
    if min(num_items, num_parents, num_leaves, num_sessions) <= 0:
        raise DatasetError("synthetic catalog sizes and session count must be positive")
    if not 0.0 <= coherence <= 1.0:
        raise DatasetError("coherence must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    leaf_of = rng.integers(0, num_leaves, size=num_items)
    parent_of_leaf = np.arange(num_leaves) % num_parents
    triples = np.stack([np.arange(num_items), parent_of_leaf[leaf_of], leaf_of], axis=1)
    cohorts = [np.flatnonzero(leaf_of == a) for a in range(num_leaves)]

    events: list[RawEvent] = []
    lengths = 2 + rng.poisson(max(mean_length - 2.0, 0.0), size=num_sessions)
    for s in range(num_sessions):
        t0 = s * 3_600_000
        item = int(rng.integers(num_items))
        for step in range(int(lengths[s])):
            if step:
                if rng.random() < coherence:
                    cohort = cohorts[leaf_of[item]]
                    item = int(cohort[rng.integers(len(cohort))])
                else:
                    item = int(rng.integers(num_items))
            events.append(RawEvent(s, t0 + step * 60_000, item))
    return events, AttributeRecords(triples, num_items, num_parents, num_leaves)

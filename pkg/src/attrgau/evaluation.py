"""Ranking metrics, attribute proximity analysis and robustness harnesses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SessionExample
from .errors import DatasetError
from .graph import AttributeRecords


@dataclass
class MetricsReport:
    hr: dict[int, float]
    mrr: dict[int, float]
    count: int
    groups: list[dict] | None = None

    def as_dict(self) -> dict:
        out: dict = {"count": self.count}
        for n in sorted(self.hr):
            out[f"HR@{n}"] = self.hr[n]
            out[f"MRR@{n}"] = self.mrr[n]
        if self.groups is not None:
            out["groups"] = self.groups
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target; ties go to the smaller item id."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    t_scores = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > t_scores) | ((scores == t_scores) & (ids < targets[:, None]))
    return ahead.sum(axis=1) + 1


def metrics_from_ranks(ranks: np.ndarray, ns: Sequence[int] = (5, 10)) -> MetricsReport:
    """HR@N and MRR@N in percent from 1-based target ranks."""
    ranks = np.asarray(ranks)
    hr, mrr = {}, {}
    for n in ns:
        hit = ranks <= n
        hr[n] = 100.0 * float(hit.mean()) if len(ranks) else 0.0
        mrr[n] = 100.0 * float(np.where(hit, 1.0 / np.maximum(ranks, 1), 0.0).mean()) if len(ranks) else 0.0
    return MetricsReport(hr, mrr, len(ranks))


def rank_metrics(scores: np.ndarray, targets: Sequence[int], ns: Sequence[int] = (5, 10)) -> MetricsReport:
    if not len(targets):
        return metrics_from_ranks(np.zeros(0, dtype=np.int64), ns)
    return metrics_from_ranks(target_ranks(scores, np.asarray(targets)), ns)


def attribute_proximity_mrr(examples: Sequence[SessionExample], records: AttributeRecords, level: str) -> float:
    """Mean reciprocal rank of the latest prefix item sharing an attribute with the target.

    The prefix is read from the most recent click backwards; sessions with no
    sharing item contribute 0. Returned in percent.
    """
    if level not in ("parent", "leaf"):
        raise ValueError(f"level must be 'parent' or 'leaf', got {level!r}")
    if not examples:
        return 0.0
    attrs = records.item_attributes(level)
    total = 0.0
    for ex in examples:
        wanted = attrs[ex.target]
        for rank, item in enumerate(reversed(ex.prefix), start=1):
            if wanted & attrs[item]:
                total += 1.0 / rank
                break
    return 100.0 * total / len(examples)


def inject_noise(examples: Sequence[SessionExample], ratio: float, seed: int,
                 num_items: int) -> list[SessionExample]:
    """Insert ``ceil(ratio * len)`` unrelated items at random prefix positions.

    Noise items are distinct, and never in the session or equal to the target.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"noise ratio must lie in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    out = []
    for ex in examples:
        k = int(math.ceil(ratio * len(ex.prefix)))
        banned = set(ex.prefix) | {ex.target}
        pool = np.array([i for i in range(num_items) if i not in banned], dtype=np.int64)
        if len(pool) < k:
            raise DatasetError(f"catalog of {num_items} items too small to draw {k} noise items")
        noise = rng.choice(pool, size=k, replace=False)
        seq = list(ex.prefix)
        for item in noise:
            seq.insert(int(rng.integers(len(seq) + 1)), int(item))
        out.append(SessionExample(tuple(seq), ex.target, ex.origin_session, ex.split))
    return out


def popularity_groups(examples: Sequence[SessionExample], train_counts: np.ndarray,
                      num_groups: int = 6) -> np.ndarray:
    """Group id (1 = least popular target) per example, equal-sized groups.

    Ties in popularity are broken by target id, then by example order; the
    first ``len % num_groups`` groups take one extra example.
    """
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    n = len(examples)
    if n < num_groups:
        raise DatasetError(f"{n} examples cannot fill {num_groups} groups")
    targets = np.array([ex.target for ex in examples], dtype=np.int64)
    pop = np.asarray(train_counts)[targets]
    order = np.lexsort((np.arange(n), targets, pop))
    base, extra = divmod(n, num_groups)
    sizes = [base + (1 if g < extra else 0) for g in range(num_groups)]
    groups = np.empty(n, dtype=np.int64)
    start = 0
    for g, size in enumerate(sizes, start=1):
        groups[order[start:start + size]] = g
        start += size
    return groups


def grouped_metrics(scores: np.ndarray, targets: np.ndarray, groups: np.ndarray,
                    ns: Sequence[int] = (5, 10)) -> list[dict]:
    out = []
    for g in np.unique(groups):
        sel = groups == g
        rep = rank_metrics(scores[sel], targets[sel], ns)
        out.append({"group": int(g), **rep.as_dict()})
    return out


def write_plot_data(path: str | Path, x_label: str, xs: Sequence, series: dict[str, Sequence[float]]) -> None:
    """Whitespace-separated columns with a commented header row."""
    names = list(series)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join([x_label, *names]) + "\n")
        for i, x in enumerate(xs):
            fh.write(" ".join([str(x), *(repr(float(series[n][i])) for n in names)]) + "\n")

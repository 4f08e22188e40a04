"""Training loop wiring propagation, dual-channel encoding and all objectives."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .backbone import (GGNN, BackboneParams, SessionBatch, SessionGraph, build_session_graph, collate,
                       encode_batch, score_logits)
from .data import DatasetBundle, SessionExample
from .errors import ConfigError, DatasetError, TrainingDivergedError
from .evaluation import MetricsReport, metrics_from_ranks, target_ranks
from .graph import AttributedGraph, build_graph, propagate
from .objectives import (LossWeights, align_loss, ccr_loss, combined_constraint, cross_entropy_from_logits,
                         rec_loss, total_loss, uniform_loss)

logger = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "w/o L_ccr": {"lambda1": 0.0},
    "w/o L_align": {"gamma1": 0.0},
    "w/o L_uniform": {"gamma2": 0.0},
    "vanilla": {"lambda1": 0.0, "lambda2": 0.0, "use_attributes": False},
}
_VARIANT_ALIASES = {"wo_ccr": "w/o L_ccr", "wo_align": "w/o L_align", "wo_uniform": "w/o L_uniform"}


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 100
    batch_size: int = 100
    learning_rate: float = 0.001
    lr_decay: float = 0.1
    lr_decay_every: int = 3
    max_epochs: int = 30
    early_stop_patience: int = 10
    num_layers: int = 2
    dropout_rate: float = 0.2
    gamma1: float = 0.25
    gamma2: float = 1.0
    lambda1: float = 0.0005
    lambda2: float = 1.0
    lambda3: float = 1e-5
    tau: float = 0.2
    seed: int = 0
    max_session_len: int = 50
    negative_samples: int = 0          # 0 = every other entity is a negative
    ggnn_steps: int = 1
    use_attributes: bool = True
    ccr_reduction: str = "sum"
    ccr_anchors: str = "full"          # "full" tables or items in the current "batch"
    rec_loss: str = "bce"              # literal binary cross-entropy, or "ce" shortcut
    eval_batch_size: int = 500
    variant: str = "full"

    def __post_init__(self):
        positives = ("hidden_dim", "batch_size", "learning_rate", "lr_decay", "lr_decay_every",
                     "early_stop_patience", "num_layers", "tau", "max_session_len", "ggnn_steps",
                     "eval_batch_size")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_epochs < 0 or self.negative_samples < 0:
            raise ConfigError("max_epochs and negative_samples must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.ccr_reduction not in ("sum", "mean"):
            raise ConfigError("ccr_reduction must be 'sum' or 'mean'")
        if self.ccr_anchors not in ("full", "batch"):
            raise ConfigError("ccr_anchors must be 'full' or 'batch'")
        if self.rec_loss not in ("bce", "ce"):
            raise ConfigError("rec_loss must be 'bce' or 'ce'")
        self.loss_weights  # validates signs

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.gamma1, self.gamma2, self.lambda1, self.lambda2, self.lambda3, self.tau)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        """Apply string-valued overrides (config file or command line)."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, raw in overrides.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(types[key], raw, key)
        return self.replace(**changes)

    @classmethod
    def from_file(cls, path: str | Path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).with_overrides(read_config_file(path))


def _coerce(type_name, raw, key: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if type_name in ("int", int):
            return int(raw)
        if type_name in ("float", float):
            return float(raw)
        if type_name in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def ablation_switches(config: TrainConfig, variant: str) -> TrainConfig:
    name = _VARIANT_ALIASES.get(variant, variant)
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return config.replace(variant=name, **VARIANTS[name])


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from a single seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


# -- batches --------------------------------------------------------------------------------
@dataclass
class PreparedExamples:
    graphs: list[SessionGraph]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def batch(self, idx: Sequence[int]) -> tuple[SessionBatch, np.ndarray]:
        return collate([self.graphs[i] for i in idx]), self.targets[np.asarray(idx)]


def prepare_examples(examples: Sequence[SessionExample], max_len: int) -> PreparedExamples:
    return PreparedExamples([build_session_graph(ex.prefix, max_len) for ex in examples],
                            np.array([ex.target for ex in examples], dtype=np.int64))


# -- losses -----------------------------------------------------------------------------------
@dataclass
class LossTerms:
    total: T.Tensor
    rec: T.Tensor
    ccr: T.Tensor | None = None
    align: T.Tensor | None = None
    uniform: T.Tensor | None = None
    l2: float = 0.0

    def breakdown(self) -> dict[str, float]:
        def val(t):
            return 0.0 if t is None else float(t.data)
        return {"rec": val(self.rec), "ccr": val(self.ccr), "align": val(self.align),
                "uniform": val(self.uniform), "l2": self.l2, "total": val(self.total)}


def holistic_views(params: BackboneParams, graph: AttributedGraph):
    E0 = T.concat([params["item_emb"], params["parent_emb"], params["leaf_emb"]], axis=0)
    Eh = propagate(graph, E0).Eh
    return Eh[graph.item_slice], Eh[graph.leaf_slice]


def compute_losses(params: BackboneParams, graph: AttributedGraph | None, batch: SessionBatch,
                   targets: np.ndarray, config: TrainConfig, training: bool = True,
                   dropout_rng: np.random.Generator | None = None,
                   negative_rng: np.random.Generator | None = None) -> LossTerms:
    w = config.loss_weights
    items = params["item_emb"]
    use_attr = config.use_attributes and graph is not None
    hol_items = hol_leaves = None
    if use_attr:
        hol_items, hol_leaves = holistic_views(params, graph)
    want_au = use_attr and w.lambda2 > 0
    out = encode_batch(batch, params, items, hol_items, config.dropout_rate, training, dropout_rng,
                       encoder=GGNN(params, config.ggnn_steps), need_channel_sessions=want_au)
    logits = score_logits(out.s_v, items)
    if config.rec_loss == "bce":
        rec = rec_loss(T.row_softmax(logits), targets)
    else:
        rec = cross_entropy_from_logits(logits, targets)

    terms = LossTerms(total=rec, rec=rec)
    ccr = au = None
    if use_attr and w.lambda1 > 0:
        neg = config.negative_samples or None
        anchors = None
        if config.ccr_anchors == "batch":
            seen = np.take_along_axis(batch.items, batch.alias, axis=1)[batch.mask > 0]
            anchors = np.unique(np.concatenate([seen, targets]))
        ccr = ccr_loss(hol_items, items, w.tau, num_negatives=neg, anchors=anchors,
                       reduction=config.ccr_reduction, rng=negative_rng)
        if graph.num_leaves > 0:
            ccr = ccr + ccr_loss(hol_leaves, params["leaf_emb"], w.tau, num_negatives=neg,
                                 reduction=config.ccr_reduction, rng=negative_rng)
        terms.ccr = ccr
    if want_au:
        terms.align = align_loss(out.s_h, out.s_o)
        terms.uniform = uniform_loss(out.s_h, out.s_o)
        au = combined_constraint(terms.align, terms.uniform, w.gamma1, w.gamma2)
    trainable = params.trainable(use_attr)
    zero = T.Tensor(0.0)
    terms.total = total_loss(rec, ccr if ccr is not None else zero, au if au is not None else zero,
                             trainable.values(), w.lambda1, w.lambda2, w.lambda3)
    terms.l2 = float(sum(float((t.data * t.data).sum()) for t in trainable.values()))
    return terms


def train_step(batch: SessionBatch | Sequence[SessionExample], targets: np.ndarray | None,
               params: BackboneParams, graph: AttributedGraph | None, config: TrainConfig,
               optimizer, dropout_rng: np.random.Generator, negative_rng: np.random.Generator | None = None,
               ) -> dict[str, float]:
    """One forward/backward pass and one Adam update; returns the loss breakdown."""
    if not isinstance(batch, SessionBatch):
        if len(batch) == 0:
            raise DatasetError("train_step needs a non-empty batch")
        prepared = prepare_examples(batch, config.max_session_len)
        batch, targets = prepared.batch(range(len(prepared)))
    terms = compute_losses(params, graph, batch, targets, config, True, dropout_rng, negative_rng)
    breakdown = terms.breakdown()
    if not np.isfinite(breakdown["total"]):
        raise TrainingDivergedError("non-finite training loss", {
            "losses": breakdown,
            "param_norms": {k: float(np.linalg.norm(t.data)) for k, t in params.tensors.items()},
            "finite_params": {k: bool(np.isfinite(t.data).all()) for k, t in params.tensors.items()},
        })
    optimizer.zero_grad()
    terms.total.backward()
    optimizer.step()
    if not all(np.isfinite(t.data).all() for t in optimizer.params.values()):
        raise TrainingDivergedError("non-finite parameters after update", {"losses": breakdown})
    return breakdown


# -- evaluation -------------------------------------------------------------------------------
def iter_scores(params: BackboneParams, graph: AttributedGraph | None, prepared: PreparedExamples,
                config: TrainConfig) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(scores, targets)`` per evaluation batch, no dropout, no graph recording."""
    with T.no_grad():
        items = params["item_emb"]
        hol_items = None
        if config.use_attributes and graph is not None:
            hol_items, _ = holistic_views(params, graph)
        encoder = GGNN(params, config.ggnn_steps)
        for start in range(0, len(prepared), config.eval_batch_size):
            idx = range(start, min(start + config.eval_batch_size, len(prepared)))
            batch, targets = prepared.batch(idx)
            out = encode_batch(batch, params, items, hol_items, config.dropout_rate, False,
                               encoder=encoder, need_channel_sessions=False)
            yield score_logits(out.s_v, items).data, targets


def example_ranks(params, graph, prepared: PreparedExamples, config: TrainConfig) -> np.ndarray:
    ranks = [target_ranks(s, t) for s, t in iter_scores(params, graph, prepared, config)]
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def evaluate(params: BackboneParams, graph: AttributedGraph | None, examples, config: TrainConfig,
             ns: Sequence[int] = (5, 10)) -> MetricsReport:
    prepared = examples if isinstance(examples, PreparedExamples) else prepare_examples(examples, config.max_session_len)
    return metrics_from_ranks(example_ranks(params, graph, prepared, config), ns)


# -- fit --------------------------------------------------------------------------------------
@dataclass
class TrainReport:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metrics: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    stopped_early: bool = False

    def records(self, include_timing: bool = True) -> list[dict]:
        recs = []
        for e in self.epochs:
            rec = {"type": "epoch", **e}
            if not include_timing:
                rec.pop("seconds", None)
            recs.append(rec)
        summary = {"type": "summary", "best_epoch": self.best_epoch, "best_metrics": self.best_metrics,
                   "epochs_run": len(self.epochs), "stopped_early": self.stopped_early,
                   "variant": self.config.get("variant"), "config": self.config}
        if include_timing:
            summary["wall_clock_seconds"] = self.wall_clock_seconds
        recs.append(summary)
        return recs

    def to_jsonl(self, include_timing: bool = True) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records(include_timing))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


SELECTION_METRIC = "MRR@5"


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_every)


def fit(bundle: DatasetBundle, config: TrainConfig, graph: AttributedGraph | None = None,
        ) -> tuple[BackboneParams, TrainReport]:
    """Train with per-epoch test evaluation and early stopping on MRR@5.

    Returns the parameters of the best epoch (the initial parameters when no
    epoch runs).
    """
    from .optim import Adam

    started = time.perf_counter()
    records = bundle.attributes
    if config.use_attributes:
        if graph is None:
            graph = build_graph(records, config.num_layers)
        elif graph.num_layers != config.num_layers:
            graph = graph.with_layers(config.num_layers)
        if graph.num_items != bundle.num_items:
            raise DatasetError(f"graph has {graph.num_items} items, bundle has {bundle.num_items}")
    else:
        graph = None
    if not bundle.train or not bundle.test:
        raise DatasetError("fit needs both training and test examples")

    params = BackboneParams.initialize(bundle.num_items, records.num_parents, records.num_leaves,
                                       config.hidden_dim, seed_stream(config.seed, "init"))
    shuffle_rng = seed_stream(config.seed, "shuffle")
    dropout_rng = seed_stream(config.seed, "dropout")
    negative_rng = seed_stream(config.seed, "negatives")
    optimizer = Adam(params.trainable(config.use_attributes), lr=config.learning_rate)
    train = prepare_examples(bundle.train, config.max_session_len)
    test = prepare_examples(bundle.test, config.max_session_len)

    report = TrainReport(config=config.to_dict())
    best_score, best_arrays, since_best = -np.inf, params.copy_arrays(), 0
    for epoch in range(config.max_epochs):
        epoch_start = time.perf_counter()
        optimizer.lr = lr_at_epoch(config, epoch)
        order = shuffle_rng.permutation(len(train))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch, targets = train.batch(order[start:start + config.batch_size])
            losses = train_step(batch, targets, params, graph, config, optimizer, dropout_rng, negative_rng)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        metrics = metrics_from_ranks(example_ranks(params, graph, test, config))
        mdict = metrics.as_dict()
        report.epochs.append({
            "epoch": epoch, "lr": optimizer.lr,
            "losses": {k: v / n_batches for k, v in sums.items()},
            "metrics": mdict, "seconds": time.perf_counter() - epoch_start,
        })
        logger.info("epoch %d lr=%.2g loss=%.5f %s=%.3f", epoch, optimizer.lr,
                    sums["total"] / n_batches, SELECTION_METRIC, mdict[SELECTION_METRIC])
        if mdict[SELECTION_METRIC] > best_score:
            best_score, best_arrays, since_best = mdict[SELECTION_METRIC], params.copy_arrays(), 0
            report.best_epoch, report.best_metrics = epoch, mdict
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                report.stopped_early = True
                break
    params.load_arrays(best_arrays)
    report.wall_clock_seconds = time.perf_counter() - started
    return params, report

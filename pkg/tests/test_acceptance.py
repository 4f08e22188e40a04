"""Acceptance suite: ten end-to-end criteria, each printing one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (or execute this file directly).
Training-based criteria share cached runs; the whole file takes roughly
25 minutes on one CPU core.
"""

from __future__ import annotations

import time
from functools import lru_cache

import numpy as np
import pytest
import scipy.sparse as sp

from attrgau import tensor as T
from attrgau.backbone import (BackboneParams, attention_readout, build_session_graph, collate, ggnn_forward)
from attrgau.data import DatasetBundle, preprocess, subsample_train, synth_generate
from attrgau.evaluation import attribute_proximity_mrr
from attrgau.graph import AttributeRecords, build_graph, propagate
from attrgau.objectives import align_loss, ccr_loss, cross_entropy_from_logits, rec_loss, total_loss, uniform_loss
from attrgau.tensor import Tensor
from attrgau.trainer import TrainConfig, ablation_switches, compute_losses, fit, holistic_views, seed_stream

from conftest import numeric_grad, random_records, rel_error

SEEDS = (0, 1, 2)
FRACTIONS = (0.25, 0.5, 1.0)
# Uniformity/alignment weights frozen from a grid search on the held-out tuning seed 100.
SYNTH_WEIGHTS = dict(gamma2=0.1, lambda2=0.1)
BASE = TrainConfig(hidden_dim=32, max_epochs=15, **SYNTH_WEIGHTS)


def announce(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# -- shared synthetic runs --------------------------------------------------------------------
@lru_cache(maxsize=None)
def synthetic_bundle(seed: int, coherence: float = 0.9) -> DatasetBundle:
    events, records = synth_generate(200, 4, 10, 5000, coherence, seed=seed)
    return preprocess(events, attributes=records, test_fraction=0.2)


def run_config(seed: int, variant: str, **changes) -> TrainConfig:
    return ablation_switches(BASE.replace(seed=seed, **changes), variant)


@lru_cache(maxsize=None)
def trained(seed: int, variant: str, fraction: float = 1.0, num_layers: int = 2, lambda1: float | None = None):
    bundle = synthetic_bundle(seed)
    if fraction < 1.0:
        bundle = subsample_train(bundle, fraction, seed)
    changes = {"num_layers": num_layers}
    if lambda1 is not None:
        changes["lambda1"] = lambda1
    started = time.perf_counter()
    params, report = fit(bundle, run_config(seed, variant, **changes))
    return params, report, time.perf_counter() - started


def hr5(seed: int, variant: str, fraction: float = 1.0) -> float:
    return trained(seed, variant, fraction)[1].best_metrics["HR@5"]


# -- 1 and 2: graph oracle and degree identity ----------------------------------------------------
def pair_counts(records: AttributeRecords) -> tuple[np.ndarray, np.ndarray]:
    t = records.triples
    items = np.zeros(records.num_items, dtype=np.int64)
    leaves = np.zeros(records.num_leaves, dtype=np.int64)
    for i, _, a in t:
        items[i] += 1
        leaves[a] += 1
    return items, leaves


def per_node_layer(records: AttributeRecords, E: np.ndarray) -> np.ndarray:
    """One refinement computed node by node from the triple list."""
    nv, np_ = records.num_items, records.num_parents
    n_item, n_leaf = pair_counts(records)
    out = np.zeros_like(E)
    for k in range(len(E)):
        if nv <= k < nv + np_:
            out[k] = E[k]
            continue
        is_item = k < nv
        node = k if is_item else k - nv - np_
        for i, c, a in records.triples:
            if (i if is_item else a) != node:
                continue
            n_self = n_item[i] if is_item else n_leaf[a]
            other = nv + np_ + a if is_item else i
            out[k] += E[other] / np.sqrt(n_item[i] * n_leaf[a]) + E[nv + c] / n_self
    return out


def random_graphs(count: int = 100):
    for s in range(count):
        yield random_records(np.random.default_rng(s), 10, 4, 8)


def test_criterion_01_graph_oracle_equivalence(capsys):
    started = time.perf_counter()
    worst = 0.0
    for s, records in enumerate(random_graphs()):
        L = 1 + s % 4
        g = build_graph(records, L)
        E0 = np.random.default_rng(1000 + s).normal(size=(records.num_nodes, 4))
        layers = propagate(g, Tensor(E0)).per_layer
        E = E0
        for layer in range(L + 1):
            if layer:
                E = per_node_layer(records, E)
            worst = max(worst, float(np.abs(layers[layer].data - E).max()) if E.size else 0.0)
    elapsed = time.perf_counter() - started
    ok = worst < 1e-10 and elapsed < 10
    announce(capsys, 1, ok, f"max abs error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_degree_identity(capsys):
    mismatches = 0
    bad_parent_rows = 0
    for records in random_graphs():
        g = build_graph(records)
        n_item, n_leaf = pair_counts(records)
        leaf_deg = g.degrees[g.leaf_slice]
        mismatches += int(np.sum(np.where(n_item > 0, g.degrees[:records.num_items] != n_item, False)))
        mismatches += int(np.sum(np.where(n_leaf > 0, leaf_deg != n_leaf, False)))
        dense = sp.csr_matrix(g.norm_adj).toarray()
        rows = dense[g.parent_slice]
        ident = np.zeros_like(rows)
        ident[np.arange(records.num_parents), records.num_items + np.arange(records.num_parents)] = 1.0
        bad_parent_rows += int(np.sum(np.any(rows != ident, axis=1)))
    ok = mismatches == 0 and bad_parent_rows == 0
    announce(capsys, 2, ok, f"{mismatches} degree mismatches, {bad_parent_rows} non-identity parent rows")
    assert ok


# -- 3: gradient suite ---------------------------------------------------------------------------
def _gradcheck(fn, arrays: list[np.ndarray], h: float = 1e-5) -> float:
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    w = np.random.default_rng(7).normal(size=out.shape)
    (out * w).sum().backward()
    worst = 0.0
    for a, t in zip(arrays, ts):
        num = numeric_grad(lambda: float((fn(*[Tensor(x) for x in arrays]).data * w).sum()), a, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def _param_gradcheck(loss_fn, tensors: dict[str, Tensor], h: float = 1e-5) -> float:
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors.values():
        num = numeric_grad(lambda: float(loss_fn().data), t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def gradient_cases() -> dict[str, float]:
    rng = np.random.default_rng(42)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    nrm = lambda *s: rng.normal(size=s)  # noqa: E731
    S = sp.random(4, 3, density=0.6, random_state=3, format="csr")
    ops = {
        "add": (lambda a, b: a + b, [nrm(3, 4), nrm(1, 4)]),
        "sub": (lambda a, b: a - b, [nrm(3, 4), nrm(3, 1)]),
        "mul": (lambda a, b: a * b, [nrm(3, 4), nrm(4)]),
        "div": (lambda a, b: a / b, [nrm(3, 4), pos(3, 4)]),
        "square": (T.square, [nrm(3, 4)]),
        "exp": (T.exp, [nrm(3, 4)]),
        "log": (T.log, [pos(3, 4)]),
        "clip": (lambda x: T.clip(x, 0.8, 1.6), [pos(3, 4)]),
        "sigmoid": (T.sigmoid, [nrm(3, 4)]),
        "tanh": (T.tanh, [nrm(3, 4)]),
        "sum": (lambda x: T.tsum(x, axis=1), [nrm(3, 4)]),
        "mean": (lambda x: T.mean(x, axis=0, keepdims=True), [nrm(3, 4)]),
        "reshape": (lambda x: T.reshape(x, (2, 6)), [nrm(3, 4)]),
        "swapaxes": (lambda x: T.swapaxes(x, 0, 2), [nrm(2, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=0), [nrm(2, 4), nrm(3, 4)]),
        "index": (lambda x: T.index(x, (slice(1, None), [0, 2, 2])), [nrm(3, 4)]),
        "take_rows": (lambda x: T.take_rows(x, [2, 0, 2]), [nrm(3, 4)]),
        "matmul": (T.matmul, [nrm(2, 3, 4), nrm(2, 4, 2)]),
        "spmm": (lambda d: T.spmm(S, d), [nrm(3, 5)]),
        "softmax": (lambda x: T.softmax(x, axis=0), [nrm(3, 4)]),
        "row_softmax": (T.row_softmax, [nrm(3, 4)]),
        "log_softmax": (T.log_softmax, [nrm(3, 4)]),
        "l2_normalize_rows": (T.l2_normalize_rows, [nrm(3, 4)]),
        "dropout": (lambda x: T.dropout(x, 0.3, True, 5), [nrm(3, 4)]),
        "sum_of_squares": (lambda a, b: T.sum_of_squares([a, b]), [nrm(3), nrm(2, 2)]),
    }
    results = {name: _gradcheck(fn, arrays) for name, (fn, arrays) in ops.items()}

    p = BackboneParams.initialize(3, 1, 2, 4, np.random.default_rng(1))
    g = build_session_graph([0, 1, 0, 2])
    h0 = Tensor(nrm(3, 4), requires_grad=True)
    w = nrm(3, 4)
    ggnn = {k: p[k] for k in p if k.startswith("ggnn.")} | {"h": h0}
    results["ggnn_forward"] = _param_gradcheck(lambda: T.tsum(ggnn_forward(g, h0, p) * w), ggnn)
    enc = Tensor(nrm(4, 4), requires_grad=True)
    w2 = nrm(4)
    att = {k: p[k] for k in p if k.startswith("att.")} | {"enc": enc}
    results["attention_readout"] = _param_gradcheck(lambda: T.tsum(attention_readout(enc, p) * w2), att)

    results["rec_loss"] = _gradcheck(lambda x: rec_loss(T.row_softmax(x), [1, 3]), [nrm(2, 5)])
    results["cross_entropy"] = _gradcheck(lambda x: cross_entropy_from_logits(x, [1, 3]), [nrm(2, 5)])
    results["ccr_loss"] = _gradcheck(lambda a, b: ccr_loss(a, b, 0.2), [nrm(4, 3), nrm(4, 3)])
    results["align_loss"] = _gradcheck(align_loss, [nrm(4, 3), nrm(4, 3)])
    results["uniform_loss"] = _gradcheck(uniform_loss, [nrm(4, 3), nrm(4, 3)])
    results["total_loss"] = _gradcheck(
        lambda r, c, a, q: total_loss(T.tsum(T.square(r)), T.tsum(T.exp(c)), T.tsum(a), [q], 0.3, 0.7, 0.01),
        [nrm(2), nrm(2), nrm(3), nrm(2, 2)])

    # composed objective on the toy model: d=8, three items, one parent, two leaves, batch of two
    records = AttributeRecords(np.array([[0, 0, 0], [1, 0, 0], [1, 0, 1], [2, 0, 1]]), 3, 1, 2)
    graph = build_graph(records, 2)
    cfg = TrainConfig(hidden_dim=8, lambda1=0.1, lambda3=1e-3, dropout_rate=0.2)
    toy = BackboneParams.initialize(3, 1, 2, 8, seed_stream(0, "init"))
    batch = collate([build_session_graph([0, 1]), build_session_graph([2, 0, 2])])
    targets = np.array([2, 1])

    def composed():
        return compute_losses(toy, graph, batch, targets, cfg, True, np.random.default_rng(3),
                              np.random.default_rng(4)).total

    results["composed_total"] = _param_gradcheck(composed, toy.trainable(True))
    return results


def test_criterion_03_gradient_suite(capsys):
    started = time.perf_counter()
    results = gradient_cases()
    elapsed = time.perf_counter() - started
    failing = sorted(k for k, v in results.items() if not v < 1e-4)
    ok = not failing and elapsed < 60
    announce(capsys, 3, ok, f"{len(results)} checks, worst rel error {max(results.values()):.1e}, "
                            f"{elapsed:.1f}s{', failing: ' + ','.join(failing) if failing else ''}")
    assert ok


# -- 4: closed forms ----------------------------------------------------------------------------
def test_criterion_04_closed_forms(capsys):
    e = np.eye(2)
    got = {
        "rec": rec_loss(Tensor([0.5, 0.5]), 0).item(),
        "infonce": ccr_loss(Tensor(e), Tensor(e), 0.2, reduction="mean").item(),
        "uniform": uniform_loss(Tensor([[1.0, 0.0], [-1.0, 0.0]]), Tensor([[0.0, 1.0], [0.0, -1.0]])).item(),
        "align": align_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item(),
    }
    want = {"rec": (1.386294, 1e-6), "infonce": (0.006715, 1e-6), "uniform": (-8.0, 1e-9), "align": (2.0, 1e-9)}
    ok = all(abs(got[k] - v) <= tol for k, (v, tol) in want.items())
    announce(capsys, 4, ok, " ".join(f"{k}={v:.7g}" for k, v in got.items()))
    assert ok


# -- 5: synthetic efficacy -----------------------------------------------------------------------
def test_criterion_05_synthetic_efficacy(capsys):
    full = [hr5(s, "full") for s in SEEDS]
    van = [hr5(s, "vanilla") for s in SEEDS]
    elapsed = sum(trained(s, v)[2] for s in SEEDS for v in ("full", "vanilla"))
    ok = np.mean(full) > np.mean(van) and elapsed < 15 * 60
    announce(capsys, 5, ok, f"HR@5 full {np.mean(full):.3f} {np.round(full, 2).tolist()} vs vanilla "
                            f"{np.mean(van):.3f} {np.round(van, 2).tolist()}, {elapsed / 60:.1f} min")
    assert ok


# -- 6: sparsity trend ------------------------------------------------------------------------------
def test_criterion_06_sparsity_trend(capsys):
    gains = {f: float(np.mean([(hr5(s, "full", f) - hr5(s, "vanilla", f)) / hr5(s, "vanilla", f) for s in SEEDS]))
             for f in FRACTIONS}
    ok = gains[0.25] >= gains[1.0]
    announce(capsys, 6, ok, "relative HR@5 gain " + " ".join(f"{f}:{g:+.3f}" for f, g in gains.items()))
    assert ok


# -- 7: over-smoothing ----------------------------------------------------------------------------
def mean_pairwise_cosine(E: np.ndarray) -> float:
    U = E / np.linalg.norm(E, axis=1, keepdims=True)
    C = U @ U.T
    n = len(C)
    return float((C.sum() - np.trace(C)) / (n * (n - 1)))


def holistic_cosine(seed: int, lambda1: float) -> float:
    params = trained(seed, "full", 1.0, 4, lambda1)[0]
    graph = build_graph(synthetic_bundle(seed).attributes, 4)
    with T.no_grad():
        items, _ = holistic_views(params, graph)
    return mean_pairwise_cosine(items.data)


def test_criterion_07_oversmoothing(capsys):
    with_ccr = [holistic_cosine(s, 0.0005) for s in SEEDS]
    without = [holistic_cosine(s, 0.0) for s in SEEDS]
    ok = np.mean(with_ccr) < np.mean(without)
    announce(capsys, 7, ok, f"mean cosine at L=4: lambda1=0.0005 {np.mean(with_ccr):.4f} vs lambda1=0 "
                            f"{np.mean(without):.4f}")
    assert ok


# -- 8: attribute proximity ---------------------------------------------------------------------------
def brute_proximity(examples, triples: np.ndarray) -> float:
    leaf_sets: dict[int, set[int]] = {}
    for i, _, a in triples:
        leaf_sets.setdefault(int(i), set()).add(int(a))
    total = 0.0
    for ex in examples:
        want = leaf_sets.get(ex.target, set())
        prefix = list(ex.prefix)
        for back in range(1, len(prefix) + 1):
            if want & leaf_sets.get(prefix[-back], set()):
                total += 1.0 / back
                break
    return 100.0 * total / len(examples)


def test_criterion_08_proximity(capsys):
    coherent = synthetic_bundle(0, 1.0)
    random_ = synthetic_bundle(0, 0.0)
    top = attribute_proximity_mrr(coherent.test + coherent.train, coherent.attributes, "leaf")
    low = attribute_proximity_mrr(random_.test, random_.attributes, "leaf")
    brute = brute_proximity(random_.test, random_.attributes.triples)
    ok = top == 100.0 and low == brute and low < 50.0
    announce(capsys, 8, ok, f"coherence 1.0 -> {top!r}, coherence 0 -> {low:.4f} (brute force {brute:.4f})")
    assert ok


# -- 9: ablations ---------------------------------------------------------------------------------
ABLATIONS = ("wo_ccr", "wo_align", "wo_uniform")


def test_criterion_09_ablations(capsys):
    means = {v: float(np.mean([hr5(s, v) for s in SEEDS])) for v in ("full", *ABLATIONS)}
    reported = all(trained(s, v)[1].best_epoch >= 0 for s in SEEDS for v in ABLATIONS)
    ok = reported and means["full"] >= min(means[v] for v in ABLATIONS)
    announce(capsys, 9, ok, "mean HR@5 " + " ".join(f"{k}:{v:.3f}" for k, v in means.items()))
    assert ok


# -- 10: determinism --------------------------------------------------------------------------------
def test_criterion_10_determinism(capsys):
    identical = True
    for s in SEEDS:
        for variant in ("full", "vanilla"):
            params, report, _ = trained(s, variant)
            again_params, again = fit(synthetic_bundle(s), run_config(s, variant, num_layers=2))
            identical &= again.to_jsonl(include_timing=False) == report.to_jsonl(include_timing=False)
            identical &= again_params.to_bytes() == params.to_bytes()
    announce(capsys, 10, identical, "repeat runs of criterion 5 " + ("bit-identical" if identical else "differ"))
    assert identical


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

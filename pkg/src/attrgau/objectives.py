"""Loss terms: recommendation, cross-layer contrast, alignment, uniformity."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class LossWeights:
    gamma1: float = 0.25
    gamma2: float = 1.0
    lambda1: float = 0.0005
    lambda2: float = 1.0
    lambda3: float = 1e-5
    tau: float = 0.2

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def _check_targets(targets: np.ndarray, num_items: int) -> None:
    if targets.size and (targets.min() < 0 or targets.max() >= num_items):
        raise ShapeError(f"target id outside [0, {num_items})")


def rec_loss(probs: Tensor, target) -> Tensor:
    """Binary cross-entropy of the softmax output against a one-hot target.

    Accepts a single probability vector with an integer target, or a
    ``[B, V]`` matrix with ``B`` targets; batches are averaged.
    """
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    B, V = probs.shape
    _check_targets(targets, V)
    onehot = np.zeros((B, V))
    onehot[np.arange(B), targets] = 1.0
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.log(p) * onehot + T.log(1.0 - p) * (1.0 - onehot)
    return -(ll.sum() * (1.0 / B))


def cross_entropy_from_logits(logits: Tensor, target) -> Tensor:
    """The common ``-log softmax[target]`` shortcut, batch-averaged."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    B, V = logits.shape
    _check_targets(targets, V)
    onehot = np.zeros((B, V))
    onehot[np.arange(B), targets] = 1.0
    return -((T.log_softmax(logits) * onehot).sum() * (1.0 / B))


def ccr_loss(holistic: Tensor, layer0: Tensor, tau: float = 0.2, *, num_negatives: int | None = None,
             anchors: np.ndarray | None = None, reduction: str = "sum",
             rng: np.random.Generator | None = None) -> Tensor:
    """InfoNCE between each entity's holistic and layer-0 embedding.

    By default every other row of the table is a negative. ``anchors``
    restricts both anchors and negatives to a subset of rows;
    ``num_negatives`` samples that many negatives per anchor uniformly
    without replacement instead.
    """
    if holistic.shape != layer0.shape:
        raise ShapeError(f"ccr inputs differ in shape: {holistic.shape} vs {layer0.shape}")
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    if anchors is not None:
        anchors = np.asarray(anchors, dtype=np.int64)
        holistic = T.take_rows(holistic, anchors)
        layer0 = T.take_rows(layer0, anchors)
    M = holistic.shape[0]
    h = T.l2_normalize_rows(holistic)
    z = T.l2_normalize_rows(layer0)

    if num_negatives is None or num_negatives >= M - 1:
        logits = T.matmul(h, z.T) * (1.0 / tau)
        per_anchor = -(T.log_softmax(logits) * np.eye(M)).sum(axis=1)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        neg = _sample_negatives(M, num_negatives, rng)
        pos = (h * z).sum(axis=1).reshape(M, 1)
        negs = (h.reshape(M, 1, -1) * T.take_rows(z, neg)).sum(axis=2)
        logits = T.concat([pos, negs], axis=1) * (1.0 / tau)
        per_anchor = -T.log_softmax(logits)[:, 0]
    total = per_anchor.sum()
    return total * (1.0 / M) if reduction == "mean" else total


def _sample_negatives(M: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct indices per row drawn from ``range(M)`` minus the row itself."""
    draws = np.argsort(rng.random((M, M - 1)), axis=1)[:, :k]
    # shift indices at or above the anchor to skip it
    return draws + (draws >= np.arange(M)[:, None])


def align_loss(S_h: Tensor, S_o: Tensor) -> Tensor:
    diff = T.l2_normalize_rows(S_h) - T.l2_normalize_rows(S_o)
    return T.square(diff).sum(axis=1).mean()


def _log_mean_gaussian_potential(S: Tensor) -> Tensor:
    B = S.shape[0]
    u = T.l2_normalize_rows(S)
    sq_dist = 2.0 - 2.0 * T.matmul(u, u.T)
    off = 1.0 - np.eye(B)
    return T.log((T.exp(sq_dist * -2.0) * off).sum() * (1.0 / (B * (B - 1))))


def uniform_loss(S_h: Tensor, S_o: Tensor) -> Tensor:
    """Per-channel log mean Gaussian potential over distinct in-batch pairs."""
    if S_h.shape[0] < 2:
        logger.warning("uniformity term needs at least two sessions; skipping")
        return Tensor(0.0)
    return (_log_mean_gaussian_potential(S_h) + _log_mean_gaussian_potential(S_o)) * 0.5


def combined_constraint(align, uniform, gamma1: float, gamma2: float):
    return align * gamma1 + uniform * gamma2


def total_loss(rec, ccr, au, params: Iterable[Tensor], lambda1: float, lambda2: float, lambda3: float):
    l2 = T.sum_of_squares(params)
    return rec + ccr * lambda1 + au * lambda2 + l2 * lambda3

"""Local structure clustering over a target feature bank and score bank."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .nn import ForwardCache, NetworkParams, forward
from .numerics import cosine_matrix

LOG_CLAMP = 1e-8


@dataclass
class Banks:
    features: np.ndarray   # (n_t, d) masked target features
    scores: np.ndarray     # (n_t, C) softmax outputs
    sample_ids: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def copy(self) -> "Banks":
        return Banks(self.features.copy(), self.scores.copy(), self.sample_ids.copy())


@dataclass
class LscConfig:
    K: int = 5
    balance_weight: float = 1.0


def init_banks(params: NetworkParams, target_x: np.ndarray, att_t, batch_size: int = 256) -> Banks:
    """Fill both banks with one eval-mode pass over the whole target set."""
    x = np.asarray(target_x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("cannot build banks from an empty target set")
    feats, scores = [], []
    for start in range(0, x.shape[0], batch_size):
        c = forward(params, x[start:start + batch_size], att_t, training=False)
        feats.append(c.masked)
        scores.append(c.probs)
    n = x.shape[0]
    return Banks(np.vstack(feats), np.vstack(scores), np.arange(n))


def update_banks(banks: Banks, batch_ids, new_features: np.ndarray, new_scores: np.ndarray) -> Banks:
    ids = np.asarray(batch_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= banks.size):
        raise UsageError(f"bank ids out of range [0, {banks.size})")
    if new_features.shape != (ids.size, banks.features.shape[1]) or \
            new_scores.shape != (ids.size, banks.scores.shape[1]):
        raise ShapeError("update rows do not match the batch ids / bank widths")
    banks.features[ids] = new_features
    banks.scores[ids] = new_scores
    return banks


def knn(banks: Banks, queries: np.ndarray, exclude_ids: Optional[Sequence[int]], K: int) -> np.ndarray:
    """Top-K bank rows by cosine similarity for each query.

    ``exclude_ids[i]`` is the bank row of query ``i`` itself and is never
    returned; pass None to allow self matches. Ties go to the lower id.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    available = banks.size - (0 if exclude_ids is None else 1)
    if K < 1 or K >= banks.size or K > available:
        raise ConfigError(f"K={K} exceeds the {available} candidates")
    # identical bank rows must tie exactly, so score each distinct row once
    uniq, inverse = np.unique(banks.features, axis=0, return_inverse=True)
    sims = cosine_matrix(q, uniq)[:, inverse.ravel()]
    if exclude_ids is not None:
        ex = np.asarray(exclude_ids, dtype=np.int64)
        if ex.shape != (q.shape[0],):
            raise ShapeError("one exclude id per query is required")
        sims[np.arange(q.shape[0]), ex] = -np.inf
    neg = -sims
    kth = np.partition(neg, K - 1, axis=1)[:, K - 1]
    out = np.empty((q.shape[0], K), dtype=np.int64)
    for i in range(q.shape[0]):
        # every row at or above the K-th similarity, ordered by (-sim, id)
        cand = np.flatnonzero(neg[i] <= kth[i])
        out[i] = cand[np.lexsort((cand, neg[i, cand]))][:K]
    return out


def lsc_loss(probs: np.ndarray, neighbor_scores: np.ndarray, balance_weight: float = 1.0) -> float:
    """Value of the objective for batch probabilities (n, C) and neighbor scores (n, K, C)."""
    dots = np.einsum("nc,nkc->nk", probs, neighbor_scores)
    n = probs.shape[0]
    consistency = -np.log(np.maximum(dots, LOG_CLAMP)).sum() / n
    return float(consistency + balance_weight * balance_term(probs))


def balance_term(probs: np.ndarray) -> float:
    """KL(mean prediction || uniform)."""
    C = probs.shape[1]
    pbar = probs.mean(axis=0)
    return float(np.sum(pbar * np.log(np.maximum(pbar, 1e-300) * C)))


def lsc_loss_and_dlogits(cache: ForwardCache, banks: Banks, neighbor_ids: np.ndarray, cfg: LscConfig):
    """Loss and its exact gradient at the logits; bank scores are constants."""
    nb = np.asarray(neighbor_ids, dtype=np.int64)
    if nb.ndim != 2 or nb.shape[1] == 0:
        raise UsageError("each sample needs at least one neighbor")
    if nb.shape[0] != cache.n:
        raise UsageError(f"{nb.shape[0]} neighbor lists for a batch of {cache.n}")
    p = cache.probs
    n, C = p.shape
    s = banks.scores[nb]                                   # (n, K, C)
    dots = np.einsum("nc,nkc->nk", p, s)
    clamped = np.maximum(dots, LOG_CLAMP)
    loss = -np.log(clamped).sum() / n
    live = (dots > LOG_CLAMP).astype(np.float64)
    dp = -np.einsum("nk,nkc->nc", live / clamped, s) / n
    if cfg.balance_weight:
        pbar = p.mean(axis=0)
        safe = np.maximum(pbar, 1e-300)
        loss += cfg.balance_weight * float(np.sum(pbar * np.log(safe * C)))
        dp += cfg.balance_weight * (np.log(safe * C) + 1.0)[None, :] / n
    dlogits = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    return float(loss), dlogits


def write_banks_csv(banks: Banks, path, labels: Optional[np.ndarray] = None):
    d = banks.features.shape[1]
    C = banks.scores.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        head = ["id"] + [f"f{j}" for j in range(d)] + [f"s{c}" for c in range(C)] + ["pred"]
        if labels is not None:
            head.append("label")
        w.writerow(head)
        for i in range(banks.size):
            row = [int(banks.sample_ids[i])] + [repr(float(v)) for v in banks.features[i]]
            row += [repr(float(v)) for v in banks.scores[i]] + [int(banks.scores[i].argmax())]
            if labels is not None:
                row.append(int(labels[i]))
            w.writerow(row)

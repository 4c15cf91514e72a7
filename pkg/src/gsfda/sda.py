"""Sparse domain attention: one learned channel mask per domain.

Each domain owns an embedding ``e`` and its mask is ``sigmoid(scale * e)``
with scale fixed at 100. Masks are trained on the source data only and are
frozen afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ShapeError, UsageError

DEFAULT_SCALE = 100.0


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class DomainAttention:
    domain_id: int
    e: np.ndarray
    scale: float = DEFAULT_SCALE
    frozen: bool = False

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64).ravel()

    @property
    def dim(self) -> int:
        return self.e.size

    def copy(self) -> "DomainAttention":
        return DomainAttention(self.domain_id, self.e.copy(), self.scale, self.frozen)


def mask(att: DomainAttention) -> np.ndarray:
    return sigmoid(att.scale * att.e)


def as_mask_vector(m) -> Optional[np.ndarray]:
    """Accept a DomainAttention, a plain vector or None."""
    if m is None:
        return None
    if isinstance(m, DomainAttention):
        return mask(m)
    return np.asarray(m, dtype=np.float64).ravel()


def init_attention(domain_id: int, d: int, rng: np.random.Generator,
                   scale: float = DEFAULT_SCALE) -> DomainAttention:
    return DomainAttention(domain_id, rng.uniform(-0.1, 0.1, size=d), scale)


def mask_grad_to_embedding(att: DomainAttention, grad_mask: np.ndarray) -> np.ndarray:
    """Chain dL/dA through A = sigmoid(scale * e)."""
    a = mask(att)
    return np.asarray(grad_mask, dtype=np.float64) * att.scale * a * (1.0 - a)


def sparsity_penalty(att_new: DomainAttention, prior_masks: Sequence[np.ndarray]):
    """Capacity-usage penalty for channels not claimed by earlier masks.

    loss = sum_j A_j (1 - M_j) / max(1, sum_j (1 - M_j)) where M is the
    elementwise max of ``prior_masks`` (zero when there are none). Returns
    ``(loss, grad_e)`` with the gradient taken through the scaled sigmoid.
    """
    d = att_new.dim
    if len(prior_masks) == 0:
        claimed = np.zeros(d)
    else:
        priors = [np.asarray(p, dtype=np.float64).ravel() for p in prior_masks]
        for p in priors:
            if p.size != d:
                raise ShapeError(f"prior mask length {p.size} != {d}")
        claimed = np.maximum.reduce(priors)
    free = 1.0 - claimed
    denom = max(1.0, float(free.sum()))
    a = mask(att_new)
    loss = float(np.dot(a, free)) / denom
    grad_e = (free / denom) * att_new.scale * a * (1.0 - a)
    return loss, grad_e


def compensate_embedding_grad(att: DomainAttention, grad_e: np.ndarray) -> np.ndarray:
    """Rescale an embedding gradient so it behaves like an unscaled sigmoid's.

    Multiplies by sigmoid'(e) / (scale * sigmoid'(scale * e) + 1e-12), which
    undoes the vanishing slope of the saturated scaled sigmoid.
    """
    grad_e = np.asarray(grad_e, dtype=np.float64)
    if grad_e.shape != att.e.shape:
        raise ShapeError(f"gradient length {grad_e.size} != {att.dim}")
    s1 = sigmoid(att.e)
    ss = sigmoid(att.scale * att.e)
    factor = (s1 * (1.0 - s1)) / (att.scale * ss * (1.0 - ss) + 1e-12)
    return grad_e * factor


@dataclass
class MaskSet:
    """Source attention at index 0, targets at 1..N_t."""

    attentions: List[DomainAttention] = field(default_factory=list)

    def __post_init__(self):
        ids = [a.domain_id for a in self.attentions]
        if len(set(ids)) != len(ids):
            raise UsageError(f"duplicate domain ids {ids}")
        dims = {a.dim for a in self.attentions}
        if len(dims) > 1:
            raise ShapeError(f"embedding lengths differ: {sorted(dims)}")

    def __len__(self):
        return len(self.attentions)

    def __getitem__(self, i) -> DomainAttention:
        return self.attentions[i]

    @property
    def n_targets(self) -> int:
        return len(self.attentions) - 1

    def masks(self) -> List[np.ndarray]:
        return [mask(a) for a in self.attentions]

    def freeze(self):
        for a in self.attentions:
            a.frozen = True

    def copy(self) -> "MaskSet":
        return MaskSet([a.copy() for a in self.attentions])


def merge_masks(mask_set: MaskSet, current_target: int) -> np.ndarray:
    """Protection mask for adapting to ``current_target``.

    Elementwise max of the source mask and every other target's mask.
    """
    n_t = mask_set.n_targets
    if not 1 <= current_target <= n_t:
        raise UsageError(f"current_target {current_target} not in 1..{n_t}")
    merged = mask(mask_set[0]).copy()
    for i in range(1, n_t + 1):
        if i != current_target:
            merged = np.maximum(merged, mask(mask_set[i]))
    return merged

"""Dense float64 helpers: checked products, cosine similarity, seeded RNG,
momentum SGD and a central finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects in float64, row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Union

import numpy as np

from .errors import NumericError, ShapeError

NORM_FLOOR = 1e-12

SeedLike = Union[int, Sequence[int]]


def make_rng(seed: SeedLike, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``seed`` and optional stream ids.

    PCG64 seeded through ``SeedSequence`` yields the same bit stream on every
    platform, so a (seed, stream) pair fully determines all draws.
    """
    if isinstance(seed, (int, np.integer)):
        key = [int(seed) & 0xFFFFFFFFFFFFFFFF, *stream]
    else:
        key = [int(s) for s in seed] + list(stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch {u.size} vs {v.size}")
    nu = float(np.sqrt(np.dot(u, u)))
    nv = float(np.sqrt(np.dot(v, v)))
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        return 0.0
    c = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, c))


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Unit-normalize each row; rows with norm below 1e-12 become zero."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    out = np.zeros_like(m)
    ok = norms >= NORM_FLOOR
    out[ok] = m[ok] / norms[ok, None]
    return out


def cosine_matrix(queries: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity, queries (q, d) against bank rows (n, d).

    Raw dot products are divided by the norms afterwards (as in
    ``cosine_similarity``) rather than normalizing first, so exactly
    orthogonal or integer-valued rows give exact similarities. The products
    go through einsum rather than BLAS: BLAS kernels accumulate differently
    depending on a column's position, which can split exact ties by an ulp.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    b = np.atleast_2d(np.asarray(bank, dtype=np.float64))
    if q.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dims differ: {q.shape[1]} vs {b.shape[1]}")
    nq = np.sqrt(np.einsum("ij,ij->i", q, q))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    denom = nq[:, None] * nb[None, :]
    ok = (nq[:, None] >= NORM_FLOOR) & (nb[None, :] >= NORM_FLOOR)
    sims = np.divide(np.einsum("qd,nd->qn", q, b), denom, out=np.zeros_like(denom), where=ok)
    return np.clip(sims, -1.0, 1.0)


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    # per-key learning-rate multipliers; missing keys use 1
    lr_scale: Dict[str, float] = field(default_factory=dict)


def sgd_step(param: np.ndarray, grad: np.ndarray, state: SgdState,
             key: str = "param") -> np.ndarray:
    """Classic momentum step, in place: v <- m*v + g ; p <- p - lr*v."""
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} vs grad {grad.shape}")
    v = state.velocity.get(key)
    if v is None:
        v = np.zeros_like(param)
        state.velocity[key] = v
    elif v.shape != param.shape:
        raise ShapeError(f"velocity {v.shape} vs param {param.shape}")
    v *= state.momentum
    v += grad
    param -= state.learning_rate * state.lr_scale.get(key, 1.0) * v
    return param


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], param: np.ndarray,
                     eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``param``.

    ``loss_fn`` receives a perturbed copy of ``param``; the input is never
    modified.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(param, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn(base.copy()))
        flat[i] = orig - eps
        down = float(loss_fn(base.copy()))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("loss is not finite under perturbation")
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-2) -> float:
    """Largest |a - n| / max(|a|, |n|, floor).

    With the default floor an error below 1e-4 means every entry is within
    1e-4 relative or 1e-6 absolute.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"{a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))

"""Split network p(x) = g(f(x)) with hand-written forward and backward passes.

f: input -> affine+ReLU -> affine+ReLU -> BN -> affine (W_fl, the last
feature layer, output dim d). g: one affine layer (W_g, C x d).
Weights use (out, in) storage, so rows of W_fl and columns of W_g index the
feature channels that domain masks act on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .numerics import SgdState, check_finite, sgd_step
from .sda import as_mask_vector

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PARAM_NAMES = ("W1", "b1", "W2", "b2", "bn_gamma", "bn_beta", "W_fl", "b_fl", "W_g", "b_g")
STAT_NAMES = ("bn_mean", "bn_var")
ADAPT_TRAINABLE = ("bn_gamma", "bn_beta", "W_fl", "b_fl", "W_g")


@dataclass
class NetworkParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    W_fl: np.ndarray
    b_fl: np.ndarray
    W_g: np.ndarray
    b_g: np.ndarray
    trainable: Dict[str, bool] = field(default_factory=lambda: {n: True for n in PARAM_NAMES})
    # BN running statistics captured at the end of source pretraining
    source_bn_mean: Optional[np.ndarray] = None
    source_bn_var: Optional[np.ndarray] = None

    @property
    def dims(self):
        """(input_dim, h, d, C)"""
        return self.W1.shape[1], self.W1.shape[0], self.W_fl.shape[0], self.W_g.shape[0]

    def copy(self) -> "NetworkParams":
        kw = {n: getattr(self, n).copy() for n in PARAM_NAMES + STAT_NAMES}
        kw["trainable"] = dict(self.trainable)
        for n in ("source_bn_mean", "source_bn_var"):
            v = getattr(self, n)
            kw[n] = None if v is None else v.copy()
        return NetworkParams(**kw)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {n: getattr(self, n) for n in PARAM_NAMES + STAT_NAMES}
        if self.source_bn_mean is not None:
            out["source_bn_mean"] = self.source_bn_mean
            out["source_bn_var"] = self.source_bn_var
        return out

    def set_adaptation_mode(self):
        self.trainable = {n: n in ADAPT_TRAINABLE for n in PARAM_NAMES}

    def set_source_mode(self):
        self.trainable = {n: True for n in PARAM_NAMES}

    def snapshot_source_bn(self):
        self.source_bn_mean = self.bn_mean.copy()
        self.source_bn_var = self.bn_var.copy()


def _glorot(rng, fan_out, fan_in):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_params(input_dim: int, h: int, d: int, C: int, rng: np.random.Generator) -> NetworkParams:
    if min(input_dim, h, d, C) < 1:
        raise ConfigError("network dimensions must be positive")
    return NetworkParams(
        W1=_glorot(rng, h, input_dim), b1=np.zeros(h),
        W2=_glorot(rng, h, h), b2=np.zeros(h),
        bn_gamma=np.ones(h), bn_beta=np.zeros(h),
        bn_mean=np.zeros(h), bn_var=np.ones(h),
        W_fl=_glorot(rng, d, h), b_fl=np.zeros(d),
        W_g=_glorot(rng, C, d), b_g=np.zeros(C),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    params: NetworkParams
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool
    bn_out: np.ndarray
    feature: np.ndarray
    mask: Optional[np.ndarray]
    masked: np.ndarray
    logits: np.ndarray
    probs: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _extract(params: NetworkParams, x: np.ndarray, training: bool, update_stats: bool):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.W1.shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match input_dim {params.W1.shape[1]}")
    z1 = x @ params.W1.T + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.W2.T + params.b2
    a2 = np.maximum(z2, 0.0)
    if training:
        if x.shape[0] < 2:
            raise ConfigError("BN training mode needs a batch of at least 2")
        mu = a2.mean(axis=0)
        var = a2.var(axis=0)
        if update_stats:
            params.bn_mean *= 1.0 - BN_MOMENTUM
            params.bn_mean += BN_MOMENTUM * mu
            params.bn_var *= 1.0 - BN_MOMENTUM
            params.bn_var += BN_MOMENTUM * var
    else:
        mu, var = params.bn_mean, params.bn_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (a2 - mu) * inv_std
    bn_out = params.bn_gamma * xhat + params.bn_beta
    feature = bn_out @ params.W_fl.T + params.b_fl
    return x, z1, a1, z2, a2, xhat, inv_std, bn_out, feature


def forward(params: NetworkParams, x: np.ndarray, mask=None, training: bool = False,
            update_stats: bool = True) -> ForwardCache:
    """Run the network on a batch.

    In training mode BN normalizes with batch statistics and (unless
    ``update_stats`` is False) folds them into the running statistics.
    """
    x, z1, a1, z2, a2, xhat, inv_std, bn_out, feature = _extract(params, x, training, update_stats)
    cache = ForwardCache(params, x, z1, a1, z2, a2, xhat, inv_std, training, bn_out, feature,
                         None, feature, feature, feature)
    return with_mask(cache, mask)


def with_mask(cache: ForwardCache, mask) -> ForwardCache:
    """Re-run only the classifier head of ``cache`` under a different mask."""
    params = cache.params
    m = as_mask_vector(mask)
    if m is not None and m.size != cache.feature.shape[1]:
        raise ShapeError(f"mask length {m.size} != feature dim {cache.feature.shape[1]}")
    masked = cache.feature if m is None else cache.feature * m
    logits = masked @ params.W_g.T + params.b_g
    check_finite(logits, "logits")
    return ForwardCache(params, cache.x, cache.z1, cache.a1, cache.z2, cache.a2, cache.xhat,
                        cache.inv_std, cache.training, cache.bn_out, cache.feature, m, masked,
                        logits, softmax(logits))


def _check_mask(cache: ForwardCache, mask) -> Optional[np.ndarray]:
    m = as_mask_vector(mask)
    if m is None:
        return cache.mask
    if cache.mask is None or m.shape != cache.mask.shape or not np.array_equal(m, cache.mask):
        raise UsageError("mask differs from the one used in the forward pass")
    return m


def backward_from_dlogits(cache: ForwardCache, dlogits: np.ndarray, mask=None) -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient at the logits.

    Returns one entry per trainable parameter; when the forward pass used a
    mask, the gradient with respect to the mask vector is returned under
    ``"mask"`` so the attention embedding can be trained.
    """
    m = _check_mask(cache, mask)
    p = cache.params
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != cache.logits.shape:
        raise UsageError(f"dlogits shape {dlogits.shape} does not match cached batch {cache.logits.shape}")
    grads: Dict[str, np.ndarray] = {}
    grads["W_g"] = dlogits.T @ cache.masked
    grads["b_g"] = dlogits.sum(axis=0)
    dmasked = dlogits @ p.W_g
    if m is None:
        dfeat = dmasked
    else:
        grads["mask"] = (dmasked * cache.feature).sum(axis=0)
        dfeat = dmasked * m
    grads["W_fl"] = dfeat.T @ cache.bn_out
    grads["b_fl"] = dfeat.sum(axis=0)
    dbn = dfeat @ p.W_fl
    grads["bn_gamma"] = (dbn * cache.xhat).sum(axis=0)
    grads["bn_beta"] = dbn.sum(axis=0)
    dxhat = dbn * p.bn_gamma
    if cache.training:
        n = cache.n
        da2 = (cache.inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                     - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
    else:
        da2 = dxhat * cache.inv_std
    dz2 = da2 * (cache.z2 > 0)
    grads["W2"] = dz2.T @ cache.a1
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p.W2) * (cache.z1 > 0)
    grads["W1"] = dz1.T @ cache.x
    grads["b1"] = dz1.sum(axis=0)
    for name in PARAM_NAMES:
        if not p.trainable.get(name, False):
            grads.pop(name)
    return grads


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def ce_dlogits(cache: ForwardCache, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (cache.n,):
        raise UsageError(f"{labels.size} labels for a cached batch of {cache.n}")
    C = cache.probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ConfigError(f"labels must lie in [0, {C})")
    d = cache.probs.copy()
    d[np.arange(cache.n), labels] -= 1.0
    return d / cache.n


def backward_ce(cache: ForwardCache, labels: np.ndarray, mask=None) -> Dict[str, np.ndarray]:
    """Gradients of mean cross-entropy for the cached batch."""
    return backward_from_dlogits(cache, ce_dlogits(cache, labels), mask)


def protect_gradients(grads: Dict[str, np.ndarray], protect) -> Dict[str, np.ndarray]:
    """Scale W_fl rows, b_fl entries and W_g columns by (1 - protect)."""
    a = as_mask_vector(protect)
    if a is None:
        return dict(grads)
    keep = 1.0 - a
    out = dict(grads)
    for name, g in grads.items():
        if name == "W_fl":
            if g.shape[0] != a.size:
                raise ShapeError(f"protect length {a.size} != feature dim {g.shape[0]}")
            out[name] = g * keep[:, None]
        elif name == "b_fl":
            if g.size != a.size:
                raise ShapeError(f"protect length {a.size} != feature dim {g.size}")
            out[name] = g * keep
        elif name == "W_g":
            if g.shape[1] != a.size:
                raise ShapeError(f"protect length {a.size} != feature dim {g.shape[1]}")
            out[name] = g * keep[None, :]
    return out


def apply_masked_update(params: NetworkParams, grads: Dict[str, np.ndarray], sgd: SgdState,
                        protect=None) -> NetworkParams:
    """One momentum-SGD step on every trainable parameter present in ``grads``."""
    a = as_mask_vector(protect)
    if a is not None and a.size != params.W_fl.shape[0]:
        raise ShapeError(f"protect length {a.size} != feature dim {params.W_fl.shape[0]}")
    scaled = protect_gradients(grads, a)
    for name in PARAM_NAMES:
        if name in scaled and params.trainable.get(name, False):
            sgd_step(getattr(params, name), scaled[name], sgd, key=name)
    return params


def refresh_bn_stats(params: NetworkParams, data: np.ndarray, mask=None) -> NetworkParams:
    """Recompute BN running statistics exactly from ``data``; weights untouched.

    ``mask`` is accepted for interface symmetry; BN sits before the masked
    feature layer so it has no effect.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigError("refresh_bn_stats needs a nonempty data matrix")
    x, z1, a1, z2, a2, *_ = _extract(params, data, training=False, update_stats=False)
    params.bn_mean[...] = a2.mean(axis=0)
    params.bn_var[...] = a2.var(axis=0)
    return params


def predict(params: NetworkParams, x: np.ndarray, mask=None) -> np.ndarray:
    return forward(params, x, mask, training=False).probs.argmax(axis=1)

"""Analytic-vs-central-difference checks for every hand-written gradient.

Each suite draws ``trials`` random small instances and reports the largest
relative error (with a 1e-6 absolute floor, see ``max_relative_error``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .lsc import Banks, LscConfig, lsc_loss, lsc_loss_and_dlogits
from .nn import (PARAM_NAMES, NetworkParams, backward_ce, backward_from_dlogits, cross_entropy,
                 forward, init_params, protect_gradients, softmax)
from .numerics import finite_diff_grad, make_rng, max_relative_error
from .sda import (DomainAttention, compensate_embedding_grad, mask, mask_grad_to_embedding,
                  sigmoid, sparsity_penalty)

TOLERANCE = 1e-4
EPS = 1e-6


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _random_net(rng, input_dim=3, h=5, d=4, C=3) -> NetworkParams:
    p = init_params(input_dim, h, d, C, rng)
    for name in PARAM_NAMES:
        arr = getattr(p, name)
        arr += 0.1 * rng.standard_normal(arr.shape)
    p.bn_mean[...] = rng.normal(0.0, 0.3, h)
    p.bn_var[...] = rng.uniform(0.5, 1.5, h)
    return p


def _with(params: NetworkParams, name: str, value: np.ndarray) -> NetworkParams:
    q = params.copy()
    getattr(q, name)[...] = value
    return q


def _soft_mask(rng, d):
    return rng.uniform(0.05, 0.95, d)


def check_cross_entropy(trials: int = 20, seed: int = 0) -> float:
    """Masked cross-entropy through the whole network, both BN modes."""
    rng = make_rng(seed, 101)
    worst = 0.0
    for t in range(trials):
        p = _random_net(rng)
        n = int(rng.integers(4, 7))
        x = rng.standard_normal((n, 3))
        y = rng.integers(0, 3, n)
        m = _soft_mask(rng, 4) if t % 2 == 0 else None
        training = t % 3 != 2
        grads = backward_ce(forward(p, x, m, training, update_stats=False), y)
        for name in PARAM_NAMES:
            def loss(v, name=name):
                return cross_entropy(forward(_with(p, name, v), x, m, training, update_stats=False).probs, y)
            worst = max(worst, max_relative_error(grads[name], finite_diff_grad(loss, getattr(p, name), EPS)))
        if m is not None:
            def loss_m(v):
                return cross_entropy(forward(p, x, v, training, update_stats=False).probs, y)
            worst = max(worst, max_relative_error(grads["mask"], finite_diff_grad(loss_m, m, EPS)))
    return worst


def _random_lsc_instance(rng, n=6, C=3, n_bank=10, K=3):
    scores = softmax(rng.standard_normal((n_bank, C)) * 2.0)
    banks = Banks(rng.standard_normal((n_bank, 4)), scores, np.arange(n_bank))
    nb = np.stack([rng.choice(n_bank, K, replace=False) for _ in range(n)])
    return banks, nb


def check_lsc_dlogits(trials: int = 20, seed: int = 0) -> float:
    """Both terms of the LSC objective, gradient at the logits."""
    rng = make_rng(seed, 102)
    worst = 0.0
    for t in range(trials):
        n, C = 6, 3
        banks, nb = _random_lsc_instance(rng, n, C)
        cfg = LscConfig(K=nb.shape[1], balance_weight=float(rng.uniform(0.0, 2.0)))
        p = _random_net(rng)
        c = forward(p, rng.standard_normal((n, 3)), None, True, update_stats=False)
        _, dlogits = lsc_loss_and_dlogits(c, banks, nb, cfg)
        s = banks.scores[nb]

        def loss(z):
            return lsc_loss(softmax(z), s, cfg.balance_weight)
        worst = max(worst, max_relative_error(dlogits, finite_diff_grad(loss, c.logits, EPS)))
    return worst


def check_lsc_params(trials: int = 20, seed: int = 0) -> float:
    """LSC objective chained into the adaptable parameters under a mask."""
    rng = make_rng(seed, 103)
    worst = 0.0
    for t in range(trials):
        n = 6
        banks, nb = _random_lsc_instance(rng, n)
        cfg = LscConfig(K=nb.shape[1], balance_weight=1.0)
        p = _random_net(rng)
        p.set_adaptation_mode()
        m = _soft_mask(rng, 4)
        x = rng.standard_normal((n, 3))
        c = forward(p, x, m, True, update_stats=False)
        _, dlogits = lsc_loss_and_dlogits(c, banks, nb, cfg)
        grads = backward_from_dlogits(c, dlogits)
        s = banks.scores[nb]
        for name in ("bn_gamma", "bn_beta", "W_fl", "b_fl", "W_g"):
            def loss(v, name=name):
                return lsc_loss(forward(_with(p, name, v), x, m, True, update_stats=False).probs, s, 1.0)
            worst = max(worst, max_relative_error(grads[name], finite_diff_grad(loss, getattr(p, name), EPS)))
    return worst


def check_sparsity(trials: int = 20, seed: int = 0) -> float:
    """Capacity penalty gradient with respect to the embedding."""
    rng = make_rng(seed, 104)
    worst = 0.0
    for t in range(trials):
        d = int(rng.integers(3, 9))
        att = DomainAttention(1, rng.normal(0.0, 0.02, d))
        priors = [rng.uniform(0, 1, d) for _ in range(t % 3)]
        _, g = sparsity_penalty(att, priors)

        def loss(e):
            return sparsity_penalty(DomainAttention(1, e), priors)[0]
        worst = max(worst, max_relative_error(g, finite_diff_grad(loss, att.e, EPS)))
    return worst


def check_mask_embedding(trials: int = 20, seed: int = 0) -> float:
    """Cross-entropy gradient carried from the mask into the embedding."""
    rng = make_rng(seed, 105)
    worst = 0.0
    for t in range(trials):
        p = _random_net(rng)
        n = 5
        x = rng.standard_normal((n, 3))
        y = rng.integers(0, 3, n)
        att = DomainAttention(0, rng.normal(0.0, 0.02, 4))
        g = backward_ce(forward(p, x, att, True, update_stats=False), y)
        ge = mask_grad_to_embedding(att, g["mask"])

        def loss(e):
            return cross_entropy(forward(p, x, sigmoid(100.0 * e), True, update_stats=False).probs, y)
        worst = max(worst, max_relative_error(ge, finite_diff_grad(loss, att.e, EPS)))
    return worst


def check_compensation(trials: int = 20, seed: int = 0) -> float:
    """Compensated embedding gradient against differenced penalty times a
    differenced slope ratio sigmoid'(e) / (scale * sigmoid'(scale * e))."""
    rng = make_rng(seed, 106)
    worst = 0.0
    h = 1e-7
    for t in range(trials):
        d = int(rng.integers(3, 9))
        att = DomainAttention(1, rng.normal(0.0, 0.02, d))
        priors = [rng.uniform(0, 1, d)]
        _, g = sparsity_penalty(att, priors)
        analytic = compensate_embedding_grad(att, g)

        def loss(e):
            return sparsity_penalty(DomainAttention(1, e), priors)[0]
        fd = finite_diff_grad(loss, att.e, EPS)
        e = att.e
        slope = (sigmoid(e + h) - sigmoid(e - h)) / (2 * h)
        scaled_slope = (sigmoid(100.0 * (e + h)) - sigmoid(100.0 * (e - h))) / (2 * h)
        worst = max(worst, max_relative_error(analytic, fd * slope / scaled_slope))
    return worst


def check_masked_update(trials: int = 20, seed: int = 0) -> float:
    """Protected gradients equal the gradient of L(W + (1 - A) * delta) at delta = 0."""
    rng = make_rng(seed, 107)
    worst = 0.0
    for t in range(trials):
        p = _random_net(rng)
        p.set_adaptation_mode()
        n = 5
        x = rng.standard_normal((n, 3))
        y = rng.integers(0, 3, n)
        m = _soft_mask(rng, 4)
        protect = rng.uniform(0, 1, 4)
        grads = protect_gradients(backward_ce(forward(p, x, m, True, update_stats=False), y), protect)
        keep = 1.0 - protect
        shapes = {"W_fl": keep[:, None], "b_fl": keep, "W_g": keep[None, :]}
        for name, k in shapes.items():
            base = getattr(p, name)

            def loss(delta, name=name, k=k, base=base):
                return cross_entropy(forward(_with(p, name, base + k * delta), x, m, True,
                                             update_stats=False).probs, y)
            worst = max(worst, max_relative_error(grads[name], finite_diff_grad(loss, np.zeros_like(base), EPS)))
    return worst


def check_domain_classifier(trials: int = 20, seed: int = 0) -> float:
    from .pipeline import DomainClassifier, dc_loss_and_grads

    rng = make_rng(seed, 108)
    worst = 0.0
    for t in range(trials):
        d, hid, k, n = 4, 6, 3, 8
        dc = DomainClassifier(rng.standard_normal((hid, d)), rng.standard_normal(hid),
                              rng.standard_normal((k, hid)), rng.standard_normal(k),
                              rng.standard_normal(d), rng.uniform(0.5, 2.0, d))
        feats = rng.standard_normal((n, d))
        y = rng.integers(0, k, n)
        _, grads = dc_loss_and_grads(dc, feats, y)
        for name, g in grads.items():
            def loss(v, name=name):
                kw = dc.tensors()
                kw[name] = v
                return dc_loss_and_grads(DomainClassifier(**kw), feats, y)[0]
            worst = max(worst, max_relative_error(g, finite_diff_grad(loss, getattr(dc, name), EPS)))
    return worst


SUITES: Dict[str, Callable[..., float]] = {
    "cross_entropy": check_cross_entropy,
    "mask_embedding": check_mask_embedding,
    "lsc_dlogits": check_lsc_dlogits,
    "lsc_params": check_lsc_params,
    "sparsity_penalty": check_sparsity,
    "compensation": check_compensation,
    "masked_update": check_masked_update,
    "domain_classifier": check_domain_classifier,
}


def run_all(trials: int = 20, seed: int = 0) -> List[SuiteResult]:
    return [SuiteResult(name, trials, fn(trials, seed)) for name, fn in SUITES.items()]

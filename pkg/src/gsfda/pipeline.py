"""Source pretraining, source-free target adaptation, continual adaptation,
domain-ID estimation and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import DataConfig, RunConfig
from .data import Dataset, SplitSpec, gen_two_moons, load_csv, split, standardizer
from .errors import ConfigError, TrainingError, UsageError
from .lsc import Banks, LscConfig, init_banks, knn, lsc_loss_and_dlogits, update_banks
from .metrics import accuracy, harmonic_mean, neighbor_purity
from .nn import (NetworkParams, apply_masked_update, backward_ce, backward_from_dlogits,
                 cross_entropy, forward, init_params, refresh_bn_stats, softmax, with_mask)
from .numerics import SgdState, make_rng, sgd_step
from .sda import (MaskSet, compensate_embedding_grad, init_attention, mask,
                  mask_grad_to_embedding, merge_masks, sparsity_penalty)

log = logging.getLogger(__name__)

# RNG stream ids
_INIT, _SHUFFLE_SRC, _SHUFFLE_TGT, _EXEMPLARS, _DC = 1, 2, 3, 4, 5


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    """Index batches over a (shuffled) permutation; a trailing batch of one
    sample is folded into the previous batch so BN always sees >= 2 rows."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    cuts = list(range(0, n, batch_size))
    out = [order[c:c + batch_size] for c in cuts]
    if len(out) > 1 and out[-1].size < 2:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


# ---------------------------------------------------------------- domains

@dataclass
class Domains:
    source_train: Dataset
    source_test: Dataset
    targets: List[Dataset]          # labeled; labels only used for reporting

    @property
    def test_sets(self) -> List[Dataset]:
        return [self.source_test] + list(self.targets)


def build_domains(run: RunConfig, data: DataConfig) -> Domains:
    """Materialize source train/test and the target domains for a config.

    Targets are evaluated on the same samples they are adapted on, the usual
    transductive protocol for source-free adaptation.
    """
    if data.kind == "two_moons":
        src = gen_two_moons(data.n_per_domain, data.noise_sd, data.source_rotation,
                            seed=run.seed, domain_id=0, name="source")
        targets = [gen_two_moons(data.n_per_domain, data.noise_sd, rot, seed=run.seed + 1000 * (i + 1),
                                 domain_id=i + 1, name=f"target{i + 1}")
                   for i, rot in enumerate(data.target_rotations)]
    else:
        src = load_csv(data.source_csv, has_labels=True, n_classes=run.C, domain_id=0, name="source")
        targets = [load_csv(p, has_labels=True, n_classes=run.C, domain_id=i + 1, name=f"target{i + 1}")
                   for i, p in enumerate(data.target_csvs)]
    src_train, src_test = split(src, SplitSpec(data.train_fraction, run.seed, stratified=True))
    if data.standardize:
        z = standardizer(src_train)
        src_train, src_test = z(src_train), z(src_test)
        targets = [z(t) for t in targets]
    for ds in [src_train] + targets:
        if ds.input_dim != run.input_dim:
            raise ConfigError(f"{ds.name} has {ds.input_dim} features, config says {run.input_dim}")
    return Domains(src_train, src_test, targets)


def sample_exemplars(ds: Dataset, k: int, seed: int, domain: int) -> np.ndarray:
    if len(ds) == 0:
        raise ConfigError(f"domain {domain} has no samples to draw exemplars from")
    rng = make_rng(seed, _EXEMPLARS, domain)
    idx = np.sort(rng.choice(len(ds), size=min(k, len(ds)), replace=False))
    return ds.features[idx]


# ---------------------------------------------------------------- pretraining

@dataclass
class History:
    epochs: List[Dict[str, float]] = field(default_factory=list)


def init_masks(cfg: RunConfig, rng: np.random.Generator) -> MaskSet:
    return MaskSet([init_attention(i, cfg.d, rng) for i in range(cfg.n_domains + 1)])


def pretrain_source(cfg: RunConfig, source_train: Dataset, masks: Optional[MaskSet] = None):
    """Supervised training on the source with every domain mask engaged.

    Minimizes the sum over all masks of the masked cross-entropy plus
    ``lambda_sparsity`` times each target mask's capacity penalty against the
    masks before it. Returns ``(params, masks, history)`` with masks frozen.
    """
    if source_train.labels is None:
        raise ConfigError("source pretraining needs labels")
    rng = make_rng(cfg.seed, _INIT)
    params = init_params(cfg.input_dim, cfg.h, cfg.d, cfg.C, rng)
    masks = init_masks(cfg, rng) if masks is None else masks.copy()
    if len(masks) != cfg.n_domains + 1:
        raise ConfigError(f"expected {cfg.n_domains + 1} masks, got {len(masks)}")
    params.set_source_mode()
    sgd = SgdState(cfg.lr_source, cfg.momentum)
    emb_sgd = SgdState(cfg.lr_embedding, cfg.momentum)
    shuffle = make_rng(cfg.seed, _SHUFFLE_SRC)
    x, y = source_train.features, source_train.labels
    history = History()
    for epoch in range(cfg.epochs_source):
        total, count = 0.0, 0
        for idx in batches(len(x), cfg.batch_size, shuffle):
            loss = _pretrain_step(cfg, params, masks, sgd, emb_sgd, x[idx], y[idx])
            total += loss * idx.size
            count += idx.size
        pred = forward(params, x, masks[0], training=False).probs.argmax(axis=1)
        history.epochs.append({"epoch": epoch + 1, "loss": total / max(count, 1),
                               "train_acc": accuracy(pred, y)})
    params.snapshot_source_bn()
    masks.freeze()
    for i, att in enumerate(masks.attentions):
        m = mask(att)
        undecided = int(np.sum((m > 0.05) & (m < 0.95)))
        if undecided:
            log.warning("mask %d has %d entries in (0.05, 0.95)", i, undecided)
    return params, masks, history


def _pretrain_step(cfg, params, masks, sgd, emb_sgd, xb, yb) -> float:
    base = forward(params, xb, None, training=True)
    grads: Dict[str, np.ndarray] = {}
    emb_grads = []
    loss = 0.0
    current = masks.masks()
    for i, att in enumerate(masks.attentions):
        c = with_mask(base, current[i])
        loss += cross_entropy(c.probs, yb)
        g = backward_ce(c, yb)
        ge = mask_grad_to_embedding(att, g.pop("mask"))
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
        if i >= 1 and cfg.lambda_sparsity > 0:
            pl, pg = sparsity_penalty(att, current[:i])
            loss += cfg.lambda_sparsity * pl
            ge = ge + cfg.lambda_sparsity * pg
        emb_grads.append(compensate_embedding_grad(att, ge))
    if not np.isfinite(loss):
        raise TrainingError("source pretraining diverged (non-finite loss)")
    apply_masked_update(params, grads, sgd)
    for i, att in enumerate(masks.attentions):
        if not att.frozen:
            sgd_step(att.e, emb_grads[i], emb_sgd, key=f"embedding{i}")
    return loss


# ---------------------------------------------------------------- adaptation

@dataclass
class AdaptState:
    params: NetworkParams
    banks: Optional[Banks]
    sgd: SgdState
    target_mask: np.ndarray
    protect: Optional[np.ndarray]
    lsc: LscConfig


def adapt_step(state: AdaptState, x: np.ndarray, ids: np.ndarray) -> float:
    """One mini-batch: forward, bank refresh, neighbor retrieval, LSC loss,
    backward, masked update."""
    if state.banks is None:
        raise UsageError("feature/score banks are not initialized")
    c = forward(state.params, x, state.target_mask, training=True)
    update_banks(state.banks, ids, c.masked, c.probs)
    nb = knn(state.banks, c.masked, ids, state.lsc.K)
    loss, dlogits = lsc_loss_and_dlogits(c, state.banks, nb, state.lsc)
    if not np.isfinite(loss):
        raise TrainingError("target adaptation diverged (non-finite loss)")
    grads = backward_from_dlogits(c, dlogits)
    grads.pop("mask", None)
    apply_masked_update(state.params, grads, state.sgd, state.protect)
    return loss


def adapt_target(cfg: RunConfig, params: NetworkParams, masks: MaskSet, target: Dataset,
                 protect, target_index: int = 1,
                 monitor: Optional[Callable[[NetworkParams, Banks], Dict[str, float]]] = None):
    """Source-free adaptation of a copy of ``params`` to one target domain.

    Only BN affine parameters, the last feature layer and the classifier
    weights move; gradients of the last two layers are scaled by
    ``1 - protect`` channel-wise. Returns ``(params, history, banks)``.
    """
    params = params.copy()
    params.set_adaptation_mode()
    history = History()
    if cfg.epochs_target == 0:
        return params, history, None
    x = target.features
    if cfg.K >= len(x):
        raise ConfigError(f"K={cfg.K} must be smaller than the target set ({len(x)})")
    att_t = masks[target_index]
    sgd = SgdState(cfg.lr_target, cfg.momentum,
                   lr_scale={"bn_gamma": cfg.bn_lr_scale, "bn_beta": cfg.bn_lr_scale})
    state = AdaptState(params, init_banks(params, x, att_t), sgd,
                       mask(att_t), None if protect is None else np.asarray(protect, dtype=np.float64),
                       LscConfig(cfg.K, cfg.balance_weight))
    shuffle = make_rng(cfg.seed, _SHUFFLE_TGT, target_index)
    for epoch in range(cfg.epochs_target):
        total, count = 0.0, 0
        for idx in batches(len(x), cfg.batch_size, shuffle):
            total += adapt_step(state, x[idx], idx) * idx.size
            count += idx.size
        row = {"epoch": epoch + 1, "lsc_loss": total / count}
        if monitor is not None:
            row.update(monitor(params, state.banks))
        history.epochs.append(row)
    return params, history, state.banks


def adapt_continual(cfg: RunConfig, params: NetworkParams, masks: MaskSet, targets: Sequence[Dataset],
                    test_sets: Optional[Sequence[Dataset]] = None, refresh_x: Optional[np.ndarray] = None):
    """Adapt to each target in order, protecting every other domain's channels.

    With ``test_sets`` (source first, then each target) an accuracy matrix is
    recorded: row 0 before any adaptation, row j after adapting to target j,
    one column per domain, domain-aware evaluation.
    """
    if len(targets) != masks.n_targets:
        raise ConfigError(f"{len(targets)} targets but masks for {masks.n_targets}")
    matrix = []
    histories = []
    if test_sets is not None:
        matrix.append(evaluate(params, masks, test_sets, refresh_x=refresh_x)["per_domain"])
    for j, target in enumerate(targets, start=1):
        protect = merge_masks(masks, j)
        params, hist, _ = adapt_target(cfg, params, masks, target, protect, target_index=j)
        histories.append(hist)
        if test_sets is not None:
            matrix.append(evaluate(params, masks, test_sets, refresh_x=refresh_x)["per_domain"])
    return params, matrix, histories


# ---------------------------------------------------------------- domain classifier

@dataclass
class DomainClassifier:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    in_mean: np.ndarray
    in_std: np.ndarray

    @property
    def n_domains(self) -> int:
        return self.W2.shape[0]

    def tensors(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("W1", "b1", "W2", "b2", "in_mean", "in_std")}

    def _hidden(self, feats):
        z = (feats - self.in_mean) / self.in_std
        h = z @ self.W1.T + self.b1
        return z, h, np.maximum(h, 0.0)

    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        _, _, a = self._hidden(feats)
        return softmax(a @ self.W2.T + self.b2)

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return self.predict_proba(feats).argmax(axis=1)


def domain_features(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Unmasked f(x) in eval mode with the source BN statistics snapshot."""
    p = params
    if params.source_bn_mean is not None:
        p = params.copy()
        p.bn_mean[...] = params.source_bn_mean
        p.bn_var[...] = params.source_bn_var
    return forward(p, x, None, training=False).feature


def dc_loss_and_grads(dc: DomainClassifier, feats: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of the domain classifier and its weight gradients."""
    z, h, a = dc._hidden(feats)
    p = softmax(a @ dc.W2.T + dc.b2)
    n = len(labels)
    dlog = p.copy()
    dlog[np.arange(n), labels] -= 1.0
    dlog /= n
    dh = (dlog @ dc.W2) * (h > 0)
    grads = {"W2": dlog.T @ a, "b2": dlog.sum(axis=0), "W1": dh.T @ z, "b1": dh.sum(axis=0)}
    return cross_entropy(p, labels), grads


def train_domain_classifier(cfg: RunConfig, params: NetworkParams, exemplars: Sequence[np.ndarray],
                            hidden: int = 32) -> DomainClassifier:
    """Fit a two-layer domain-ID classifier on stored per-domain exemplars."""
    if len(exemplars) == 0:
        raise ConfigError("no exemplar sets given")
    for i, ex in enumerate(exemplars):
        if len(ex) == 0:
            raise ConfigError(f"domain {i} has zero exemplars")
    feats = np.vstack([domain_features(params, ex) for ex in exemplars])
    labels = np.concatenate([np.full(len(ex), i, np.int64) for i, ex in enumerate(exemplars)])
    n_dom = len(exemplars)
    d = feats.shape[1]
    rng = make_rng(cfg.seed, _DC)
    a1 = np.sqrt(6.0 / (d + hidden))
    a2 = np.sqrt(6.0 / (hidden + n_dom))
    sd = feats.std(axis=0)
    dc = DomainClassifier(rng.uniform(-a1, a1, (hidden, d)), np.zeros(hidden),
                          rng.uniform(-a2, a2, (n_dom, hidden)), np.zeros(n_dom),
                          feats.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))
    if n_dom == 1:
        return dc
    sgd = SgdState(cfg.dc_lr, cfg.momentum)
    for _ in range(cfg.dc_epochs):
        total = 0.0
        for idx in batches(len(feats), cfg.batch_size, rng):
            loss, grads = dc_loss_and_grads(dc, feats[idx], labels[idx])
            total += loss * idx.size
            for key, g in grads.items():
                sgd_step(getattr(dc, key), g, sgd, key=key)
        if not np.isfinite(total):
            raise TrainingError("domain classifier training diverged")
        if total / len(feats) < 1e-3:
            break
    return dc


# ---------------------------------------------------------------- evaluation

def _with_refreshed_bn(params: NetworkParams, refresh_x, source_mask) -> NetworkParams:
    p = params.copy()
    refresh_bn_stats(p, refresh_x, source_mask)
    return p


def evaluate(params: NetworkParams, masks: MaskSet, test_sets: Sequence[Dataset], mode: str = "aware",
             dc: Optional[DomainClassifier] = None, refresh_x: Optional[np.ndarray] = None) -> Dict:
    """Accuracy per domain plus Acc_S, Acc_T (mean over targets) and H.

    ``aware`` evaluates each domain under its own mask; ``agnostic`` routes
    every sample to the mask of the domain the classifier predicts. With
    ``refresh_x`` (stored source samples) samples evaluated under the source
    mask use BN statistics re-estimated on those samples. ``params`` is not
    modified.
    """
    if mode not in ("aware", "agnostic"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if mode == "agnostic" and dc is None:
        raise UsageError("domain-agnostic evaluation needs a trained domain classifier")
    if len(test_sets) > len(masks):
        raise ConfigError(f"{len(test_sets)} test sets but only {len(masks)} masks")
    src_params = params if refresh_x is None else _with_refreshed_bn(params, refresh_x, masks[0])
    per_domain, domain_acc = [], []
    for k, ds in enumerate(test_sets):
        if ds.labels is None:
            raise ConfigError(f"test set {ds.name or k} is unlabeled")
        if mode == "aware":
            route = np.full(len(ds), k)
        else:
            route = dc.predict(domain_features(params, ds.features))
            domain_acc.append(accuracy(route, np.full(len(ds), k)))
        pred = np.empty(len(ds), np.int64)
        for r in np.unique(route):
            sel = route == r
            p = src_params if r == 0 else params
            pred[sel] = forward(p, ds.features[sel], masks[int(r)], training=False).probs.argmax(axis=1)
        per_domain.append(accuracy(pred, ds.labels))
    acc_s = per_domain[0]
    acc_t = float(np.mean(per_domain[1:])) if len(per_domain) > 1 else 0.0
    out = {"mode": mode, "per_domain": per_domain, "acc_s": acc_s, "acc_t": acc_t,
           "h": harmonic_mean(acc_s, acc_t)}
    if mode == "agnostic":
        out["domain_id_acc"] = domain_acc
    return out


def make_monitor(masks: MaskSet, test_sets: Sequence[Dataset], target: Dataset, k: int = 3,
                 refresh_x: Optional[np.ndarray] = None):
    """Per-epoch callback reporting Acc_S, Acc_T, H and neighbor purity."""
    def monitor(params, banks):
        ev = evaluate(params, masks, test_sets, refresh_x=refresh_x)
        pred = banks.scores.argmax(axis=1)
        acc_n, acc_np = neighbor_purity(banks, pred, target.labels, k)
        return {"acc_s": ev["acc_s"], "acc_t": ev["acc_t"], "h": ev["h"],
                "acc_n": acc_n, "acc_np": acc_np}
    return monitor

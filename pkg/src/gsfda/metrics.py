"""Accuracy, harmonic mean and neighbor-purity diagnostics (all in percent)."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.size == 0:
        return 0.0
    return float(100.0 * np.mean(pred == labels))


def harmonic_mean(acc_s: float, acc_t: float) -> float:
    if acc_s <= 0 or acc_t <= 0:
        return 0.0
    return 2.0 * acc_s * acc_t / (acc_s + acc_t)


def neighbor_purity(banks, predicted_labels, true_labels, k: int = 3):
    """(Acc_n, Acc_np) over the bank.

    Acc_n: share of samples whose k nearest bank neighbors (self excluded)
    all carry the sample's own predicted label. Acc_np: among those, the
    share whose common label is the true one.
    """
    from .lsc import knn

    n = banks.size
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the bank size {n}")
    pred = np.asarray(predicted_labels)
    true = np.asarray(true_labels)
    nb = knn(banks, banks.features, np.arange(n), k)
    agree = np.all(pred[nb] == pred[:, None], axis=1)
    n_agree = int(agree.sum())
    acc_n = 100.0 * n_agree / n
    acc_np = 100.0 * float(np.sum(pred[agree] == true[agree])) / n_agree if n_agree else 0.0
    return acc_n, acc_np

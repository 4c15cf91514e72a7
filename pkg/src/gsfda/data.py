"""Synthetic shifted domains, CSV ingestion and deterministic splits.

CSV layout: a header ``f0,f1,...,f{D-1}`` optionally followed by ``label``,
then one sample per row, UTF-8, ``.`` as decimal point. Values are written
with 17 significant digits so a save/load round trip is exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ParseError
from .numerics import make_rng


@dataclass
class Dataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    domain_id: int = 0
    name: str = ""

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, features=self.features[idx], labels=labels)

    def unlabeled(self) -> "Dataset":
        return replace(self, labels=None)


@dataclass
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0
    stratified: bool = True


def rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    theta = math.radians(degrees % 360.0)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T


def gen_two_moons(n: int, noise_sd: float = 0.1, rotation_deg: float = 0.0, seed: int = 0,
                  domain_id: int = 0, name: str = "") -> Dataset:
    """Two interleaved half circles, centred on the origin, then rotated.

    Class 0 (the upper moon) gets ceil(n/2) points and class 1 floor(n/2).
    """
    if n < 4:
        raise ConfigError("two-moons needs n >= 4")
    if noise_sd < 0:
        raise ConfigError("noise_sd must be non-negative")
    rng = make_rng(seed, 11)
    n0 = (n + 1) // 2
    n1 = n // 2
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    pts = np.vstack([upper, lower]) - np.array([0.5, 0.25])
    labels = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    pts = pts + noise_sd * rng.standard_normal(pts.shape)
    perm = rng.permutation(n)
    pts, labels = pts[perm], labels[perm]
    return Dataset(rotate(pts, rotation_deg), labels, domain_id,
                   name or f"two_moons_{rotation_deg:g}deg")


def gen_blobs(n: int, C: int, centers: np.ndarray, shift=0.0, spread: float = 0.5, seed: int = 0,
              class_weights: Optional[Sequence[float]] = None, domain_id: int = 0,
              name: str = "blobs") -> Dataset:
    """Isotropic Gaussian clusters around ``centers + shift``.

    ``shift`` broadcasts against the (C, dim) centre array, so it may be one
    displacement for all centres or one per centre. Without ``class_weights``
    labels are balanced to within one sample.
    """
    if C < 2:
        raise ConfigError("gen_blobs needs C >= 2")
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] != C:
        raise ConfigError(f"expected {C} centres, got shape {centers.shape}")
    rng = make_rng(seed, 13)
    if class_weights is None:
        labels = np.arange(n) % C
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (C,) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigError("class_weights must be C non-negative numbers")
        counts = np.floor(w / w.sum() * n).astype(np.int64)
        counts[np.argmax(w)] += n - counts.sum()
        labels = np.repeat(np.arange(C), counts)
    labels = rng.permutation(labels).astype(np.int64)
    mu = centers + np.asarray(shift, dtype=np.float64)
    pts = mu[labels] + spread * rng.standard_normal((n, centers.shape[1]))
    return Dataset(pts, labels, domain_id, name)


def split(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    if not 0.0 < spec.train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    n = len(ds)
    rng = make_rng(spec.seed, 17)
    if spec.stratified:
        if ds.labels is None:
            raise ConfigError("stratified split needs labels")
        train_idx, test_idx = [], []
        for c in np.unique(ds.labels):
            members = np.flatnonzero(ds.labels == c)
            if members.size < 2:
                raise ConfigError(f"class {c} has fewer than 2 samples")
            members = rng.permutation(members)
            k = int(round(spec.train_fraction * members.size))
            k = min(max(k, 1), members.size - 1)
            train_idx.append(members[:k])
            test_idx.append(members[k:])
        train_idx = np.sort(np.concatenate(train_idx))
        test_idx = np.sort(np.concatenate(test_idx))
    else:
        perm = rng.permutation(n)
        k = int(round(spec.train_fraction * n))
        if k <= 0 or k >= n:
            raise ConfigError("split leaves one part empty")
        train_idx, test_idx = np.sort(perm[:k]), np.sort(perm[k:])
    return ds.subset(train_idx), ds.subset(test_idx)


def standardizer(source: Dataset):
    """Per-feature z-scoring fitted on source statistics only."""
    mu = source.features.mean(axis=0)
    sd = source.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)

    def apply(ds: Dataset) -> Dataset:
        return replace(ds, features=(ds.features - mu) / sd)
    return apply


def save_csv(ds: Dataset, path, with_labels: Optional[bool] = None):
    with_labels = ds.labels is not None if with_labels is None else with_labels
    if with_labels and ds.labels is None:
        raise ConfigError("dataset has no labels to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.input_dim)] + (["label"] if with_labels else []))
        for i in range(len(ds)):
            row = [format(float(v), ".17g") for v in ds.features[i]]
            if with_labels:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


def load_csv(path, has_labels: bool, n_classes: Optional[int] = None, domain_id: int = 0,
             name: Optional[str] = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    label_col = header[-1] == "label"
    if has_labels and not label_col:
        raise ParseError("expected a final 'label' column", line=1)
    feat_names = header[:-1] if label_col else header
    expected = [f"f{j}" for j in range(len(feat_names))]
    if not feat_names or feat_names != expected:
        raise ParseError(f"header must be f0..f{len(feat_names) - 1}[,label], got {header}", line=1)
    D = len(feat_names)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        try:
            vals = [float(v) for v in row[:D]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell: {exc}", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line=lineno)
        feats.append(vals)
        if label_col:
            try:
                lab = int(row[D])
            except ValueError:
                raise ParseError(f"label {row[D]!r} is not an integer", line=lineno) from None
            if lab < 0 or (n_classes is not None and lab >= n_classes):
                raise ParseError(f"label {lab} out of range", line=lineno)
            labels.append(lab)
    if not feats:
        raise ParseError("no data rows", line=2)
    lab_arr = np.asarray(labels, dtype=np.int64) if (label_col and has_labels) else None
    return Dataset(np.asarray(feats, dtype=np.float64), lab_arr, domain_id, name or str(path))

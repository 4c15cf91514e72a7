"""Run outputs: metrics JSON, per-epoch CSV, mask CSV, continual matrix CSV
and the run manifest.

metrics.json (schema ``gsfda.metrics``, version 1)::

    {
      "schema": "gsfda.metrics", "schema_version": 1,
      "command": "adapt", "seed": 0,
      "config": {...RunConfig and DataConfig fields...},
      "epochs": [{"epoch": 1, "lsc_loss": ..., "acc_s": ..., ...}, ...],
      "final": {"acc_s": ..., "acc_t": ..., "h": ..., "per_domain": [...], ...},
      "accuracy_matrix": [[...], ...] or null,
      "extra": {...command specific...}
    }

Accuracies are percentages. The file carries no timestamps, so identical
inputs give identical bytes; wall-clock data lives in manifest.json only.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

SCHEMA = "gsfda.metrics"
SCHEMA_VERSION = 1


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def metrics_document(command: str, cfg, epochs: Sequence[Dict], final: Dict,
                     accuracy_matrix=None, extra: Optional[Dict] = None) -> Dict:
    config = {"run": dataclasses.asdict(cfg.run), "data": dataclasses.asdict(cfg.data)}
    return _plain({
        "schema": SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": cfg.run.seed,
        "config": config,
        "epochs": list(epochs),
        "final": final,
        "accuracy_matrix": accuracy_matrix,
        "extra": extra or {},
    })


def write_json(path, doc: Dict):
    Path(path).write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_epochs_csv(path, epochs: Sequence[Dict]):
    keys: List[str] = []
    for row in epochs:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys or ["epoch"])
        w.writeheader()
        for row in epochs:
            w.writerow({k: _plain(v) for k, v in row.items()})


def write_masks_csv(path, masks):
    """One row per domain: domain id, then the mask value of every channel."""
    from .sda import mask

    d = masks[0].dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["domain"] + [f"a{j}" for j in range(d)])
        for att in masks.attentions:
            w.writerow([att.domain_id] + [repr(float(v)) for v in mask(att)])


def write_matrix_csv(path, matrix, n_domains: int):
    """Rows: adaptation step (0 = before any adaptation); columns: domains."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "source"] + [f"target{j}" for j in range(1, n_domains)])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(v)) for v in row])


def write_manifest(path, command: str, argv: Sequence[str], cfg, config_text: str,
                   inputs: Optional[Dict[str, str]] = None, outputs: Sequence[str] = ()):
    from . import __version__

    doc = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.run.seed,
        "config_text": config_text,
        "inputs": inputs or {},
        "outputs": list(outputs),
        "versions": {"gsfda": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        "platform": sys.platform,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    write_json(path, doc)

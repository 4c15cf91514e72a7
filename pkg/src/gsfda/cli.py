"""Command-line front end.

Every command reads a config (a file path or the name of a bundled preset)
and writes its results under ``--out``. Exit codes: 0 success, 2 bad
configuration or usage, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config, list_presets, load_config, preset_path
from .data import save_csv
from .errors import ConfigError, NumericError, UsageError
from .metrics import accuracy
from .pipeline import (adapt_continual, adapt_target, build_domains, domain_features, evaluate,
                       make_monitor, pretrain_source, sample_exemplars, train_domain_classifier)
from .report import (metrics_document, write_epochs_csv, write_json, write_manifest,
                     write_masks_csv, write_matrix_csv)
from .sda import merge_masks

COMMANDS = ("pretrain", "adapt", "adapt-continual", "train-dc", "eval", "gradcheck",
            "dump-masks", "gen-data")
DEFAULT_PRESET = "two_moons_single"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsfda", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=DEFAULT_PRESET,
                    help=f"config file or preset name ({', '.join(list_presets())})")
    ap.add_argument("--out", default="runs/default", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--mode", choices=("aware", "agnostic"), default="aware")
    ap.add_argument("--refresh-bn", action="store_true",
                    help="re-estimate BN statistics on stored source samples before scoring the source")
    ap.add_argument("--checkpoint", default=None,
                    help="input checkpoint (default: <out>/checkpoint.bin)")
    ap.add_argument("--target", type=int, default=1, help="target index for 'adapt'")
    ap.add_argument("--trials", type=int, default=20, help="random instances per gradcheck suite")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(spec: str):
    p = Path(spec)
    if not p.exists():
        preset = preset_path(spec)
        if preset.exists():
            p = preset
        else:
            raise ConfigError(f"no config file or preset named {spec!r}")
    return load_config(p)


class Run:
    """Shared state of one CLI invocation."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = argv
        cfg = resolve_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        self.cfg = cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.ckpt_in = Path(args.checkpoint) if args.checkpoint else self.out / "checkpoint.bin"
        self.written: List[str] = []
        self._domains = None

    @property
    def domains(self):
        if self._domains is None:
            self._domains = build_domains(self.cfg.run, self.cfg.data)
        return self._domains

    def path(self, name: str) -> Path:
        self.written.append(name)
        return self.out / name

    def load(self):
        if not self.ckpt_in.exists():
            raise UsageError(f"checkpoint {self.ckpt_in} not found; run 'pretrain' first")
        params, masks, dc, exemplars, meta = load_checkpoint(self.ckpt_in)
        if masks.n_targets != self.cfg.run.n_domains:
            raise ConfigError(f"checkpoint has {masks.n_targets} target masks, config {self.cfg.run.n_domains}")
        return params, masks, dc, exemplars, meta

    def refresh_x(self, exemplars):
        if not self.args.refresh_bn:
            return None
        if 0 not in exemplars:
            raise UsageError("--refresh-bn needs stored source exemplars in the checkpoint")
        return exemplars[0]

    def finish(self, command: str, epochs, final, matrix=None, extra=None):
        doc = metrics_document(command, self.cfg, epochs, final, matrix, extra)
        write_json(self.path("metrics.json"), doc)
        write_epochs_csv(self.path("epochs.csv"), epochs)
        write_manifest(self.out / "manifest.json", command, self.argv, self.cfg,
                       dump_config(self.cfg), {"checkpoint": str(self.ckpt_in)}, self.written)


def cmd_pretrain(run: Run):
    cfg = run.cfg.run
    dom = run.domains
    params, masks, hist = pretrain_source(cfg, dom.source_train)
    exemplars = {0: sample_exemplars(dom.source_train, cfg.exemplars_per_domain, cfg.seed, 0)}
    save_checkpoint(run.path("checkpoint.bin"), params, masks, exemplars=exemplars)
    write_masks_csv(run.path("masks.csv"), masks)
    final = evaluate(params, masks, dom.test_sets)
    run.finish("pretrain", hist.epochs, final)
    print(f"source-only: Acc_S={final['acc_s']:.1f} Acc_T={final['acc_t']:.1f} H={final['h']:.1f}")


def cmd_adapt(run: Run):
    cfg = run.cfg.run
    params, masks, dc, exemplars, meta = run.load()
    j = run.args.target
    dom = run.domains
    if not 1 <= j <= len(dom.targets):
        raise ConfigError(f"--target must lie in 1..{len(dom.targets)}")
    refresh = run.refresh_x(exemplars)
    test_sets = dom.test_sets
    before = evaluate(params, masks, test_sets, refresh_x=refresh)
    target = dom.targets[j - 1]
    monitor = make_monitor(masks, test_sets, target, refresh_x=refresh)
    params, hist, _ = adapt_target(cfg, params, masks, target.unlabeled(), merge_masks(masks, j),
                                   target_index=j, monitor=monitor)
    save_checkpoint(run.path("checkpoint.bin"), params, masks, dc, exemplars, meta)
    final = evaluate(params, masks, test_sets, refresh_x=refresh)
    run.finish("adapt", hist.epochs, final, extra={"before": before, "target": j})
    print(f"adapted to target {j}: Acc_S={final['acc_s']:.1f} Acc_T={final['acc_t']:.1f} H={final['h']:.1f}")


def cmd_adapt_continual(run: Run):
    cfg = run.cfg.run
    params, masks, dc, exemplars, meta = run.load()
    dom = run.domains
    refresh = run.refresh_x(exemplars)
    params, matrix, hists = adapt_continual(cfg, params, masks, [t.unlabeled() for t in dom.targets],
                                            dom.test_sets, refresh_x=refresh)
    save_checkpoint(run.path("checkpoint.bin"), params, masks, dc, exemplars, meta)
    write_matrix_csv(run.path("continual_matrix.csv"), matrix, len(dom.test_sets))
    epochs = [dict(row, target=j) for j, h in enumerate(hists, start=1) for row in h.epochs]
    final = evaluate(params, masks, dom.test_sets, refresh_x=refresh)
    run.finish("adapt-continual", epochs, final, matrix)
    for i, row in enumerate(matrix):
        print(f"step {i}: " + " ".join(f"{v:.1f}" for v in row))


def cmd_train_dc(run: Run):
    cfg = run.cfg.run
    params, masks, _, exemplars, meta = run.load()
    dom = run.domains
    if 0 not in exemplars:
        raise ConfigError("checkpoint holds no stored source exemplars")
    sets = [exemplars[0]] + [sample_exemplars(t, cfg.exemplars_per_domain, cfg.seed, j)
                             for j, t in enumerate(dom.targets, start=1)]
    dc = train_domain_classifier(cfg, params, sets)
    save_checkpoint(run.path("checkpoint.bin"), params, masks, dc, exemplars, meta)
    held_out = [accuracy(dc.predict(domain_features(params, ds.features)), np.full(len(ds), k))
                for k, ds in enumerate(dom.test_sets)]
    run.finish("train-dc", [], {"domain_id_acc": held_out},
               extra={"exemplars_per_domain": [len(s) for s in sets]})
    print("domain-ID accuracy per domain: " + " ".join(f"{a:.1f}" for a in held_out))


def cmd_eval(run: Run):
    params, masks, dc, exemplars, _ = run.load()
    if run.args.mode == "agnostic" and dc is None:
        raise UsageError("domain-agnostic evaluation needs a domain classifier; run 'train-dc' first")
    final = evaluate(params, masks, run.domains.test_sets, run.args.mode, dc,
                     refresh_x=run.refresh_x(exemplars))
    run.finish("eval", [], final, extra={"refresh_bn": run.args.refresh_bn})
    print(f"{run.args.mode}: Acc_S={final['acc_s']:.1f} Acc_T={final['acc_t']:.1f} H={final['h']:.1f}")


def cmd_gradcheck(run: Run) -> int:
    results = gradcheck.run_all(trials=run.args.trials, seed=run.cfg.run.seed)
    for r in results:
        print(f"{r.name:<18} trials={r.trials:<3} max_rel_error={r.max_rel_error:.3e} "
              f"{'ok' if r.passed else 'FAIL'}")
    final = {r.name: r.max_rel_error for r in results}
    run.finish("gradcheck", [], final, extra={"tolerance": gradcheck.TOLERANCE})
    return 0 if all(r.passed for r in results) else 3


def cmd_dump_masks(run: Run):
    _, masks, _, _, _ = run.load()
    write_masks_csv(run.path("masks.csv"), masks)
    print(f"wrote {run.out / 'masks.csv'}")


def cmd_gen_data(run: Run):
    dom = run.domains
    save_csv(dom.source_train, run.path("source_train.csv"))
    save_csv(dom.source_test, run.path("source_test.csv"))
    for j, t in enumerate(dom.targets, start=1):
        save_csv(t, run.path(f"target{j}.csv"))
    write_manifest(run.out / "manifest.json", "gen-data", run.argv, run.cfg, dump_config(run.cfg),
                   outputs=run.written)
    print(f"wrote {len(run.written)} files to {run.out}")


HANDLERS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "adapt-continual": cmd_adapt_continual,
    "train-dc": cmd_train_dc,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-masks": cmd_dump_masks,
    "gen-data": cmd_gen_data,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args, argv)
        code = HANDLERS[args.command](run)
        return int(code or 0)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4

"""Run configuration and its INI-style text format.

Sections and keys mirror the dataclass fields below::

    [network]
    input_dim = 2
    h = 64
    ...
    [train]
    seed = 0
    ...
    [data]
    kind = two_moons
    target_rotations = 45

Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Tuple

from .errors import ConfigError


@dataclass
class RunConfig:
    # network
    input_dim: int = 2
    h: int = 64
    d: int = 32
    C: int = 2
    # training
    epochs_source: int = 200
    epochs_target: int = 100
    batch_size: int = 64
    lr_source: float = 0.01
    lr_target: float = 0.05
    lr_embedding: float = 1.0
    bn_lr_scale: float = 0.1
    momentum: float = 0.9
    K: int = 5
    balance_weight: float = 1.0
    lambda_sparsity: float = 0.1
    n_domains: int = 1
    exemplars_per_domain: int = 64
    dc_epochs: int = 300
    dc_lr: float = 0.05
    seed: int = 0

    def validate(self):
        for name in ("input_dim", "h", "d", "C", "batch_size", "K", "n_domains",
                     "exemplars_per_domain"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs_source", "epochs_target", "dc_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("lr_source", "lr_target", "lr_embedding", "bn_lr_scale", "dc_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.balance_weight < 0 or self.lambda_sparsity < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.C < 2:
            raise ConfigError("need at least two classes")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for batch normalization")
        return self


@dataclass
class DataConfig:
    kind: str = "two_moons"          # two_moons | csv
    n_per_domain: int = 1000
    noise_sd: float = 0.1
    source_rotation: float = 0.0
    target_rotations: Tuple[float, ...] = (45.0,)
    train_fraction: float = 0.9
    standardize: bool = False
    source_csv: str = ""
    target_csvs: Tuple[str, ...] = ()

    @property
    def n_targets(self) -> int:
        return len(self.target_csvs) if self.kind == "csv" else len(self.target_rotations)

    def validate(self):
        if self.kind not in ("two_moons", "csv"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "csv" and (not self.source_csv or not self.target_csvs):
            raise ConfigError("csv data needs source_csv and target_csvs")
        if self.n_targets < 1:
            raise ConfigError("at least one target domain is required")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.n_per_domain < 4:
            raise ConfigError("n_per_domain must be at least 4")
        return self


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    text: str = ""

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))


SECTIONS = {
    "network": (RunConfig, ("input_dim", "h", "d", "C")),
    "train": (RunConfig, tuple(f.name for f in fields(RunConfig)
                               if f.name not in ("input_dim", "h", "d", "C"))),
    "data": (DataConfig, tuple(f.name for f in fields(DataConfig))),
}


def _convert(cls, name: str, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype.startswith("Tuple[float"):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if ftype.startswith("Tuple[str"):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    run_kw, data_kw = {}, {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls, allowed = SECTIONS[section]
        target = run_kw if cls is RunConfig else data_kw
        for key, raw in cp.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            target[key] = _convert(cls, key, raw)
    run = RunConfig(**run_kw)
    data = DataConfig(**data_kw)
    data.validate()
    if "n_domains" not in run_kw:
        run.n_domains = data.n_targets
    elif run.n_domains != data.n_targets:
        raise ConfigError(f"n_domains={run.n_domains} but {data.n_targets} targets are configured")
    run.validate()
    return ExperimentConfig(run, data, text)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text)


def preset_path(name: str) -> Path:
    p = Path(__file__).parent / "presets" / name
    if not p.suffix:
        p = p.with_suffix(".cfg")
    return p


def list_presets() -> List[str]:
    return sorted(p.name for p in (Path(__file__).parent / "presets").glob("*.cfg"))


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back to text (used for the run manifest)."""
    lines = []
    for section, (cls, keys) in SECTIONS.items():
        obj = cfg.run if cls is RunConfig else cfg.data
        lines.append(f"[{section}]")
        for k in keys:
            v = getattr(obj, k)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)

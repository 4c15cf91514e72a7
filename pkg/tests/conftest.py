import dataclasses

import pytest

from gsfda.config import DataConfig, ExperimentConfig, RunConfig
from gsfda.pipeline import build_domains, pretrain_source


def small_config(n_targets=1, seed=0, **run_kw) -> ExperimentConfig:
    rotations = (45.0,) if n_targets == 1 else (30.0, 60.0)
    run = RunConfig(h=32, d=16, epochs_source=60, epochs_target=15, n_domains=n_targets, seed=seed)
    run = dataclasses.replace(run, **run_kw)
    data = DataConfig(n_per_domain=300, target_rotations=rotations)
    return ExperimentConfig(run.validate(), data.validate())


@pytest.fixture(scope="session")
def small_single():
    cfg = small_config(1)
    dom = build_domains(cfg.run, cfg.data)
    params, masks, hist = pretrain_source(cfg.run, dom.source_train)
    return cfg, dom, params, masks, hist


@pytest.fixture(scope="session")
def small_continual():
    cfg = small_config(2)
    dom = build_domains(cfg.run, cfg.data)
    params, masks, _ = pretrain_source(cfg.run, dom.source_train)
    return cfg, dom, params, masks


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

"""Generalized source-free domain adaptation on a small hand-differentiated network."""
from .config import DataConfig, ExperimentConfig, RunConfig, load_config, parse_config
from .data import Dataset, SplitSpec, gen_blobs, gen_two_moons, load_csv, save_csv, split
from .errors import ConfigError, NumericError, ParseError, ShapeError, TrainingError, UsageError
from .lsc import Banks, LscConfig, init_banks, knn, lsc_loss_and_dlogits, update_banks
from .metrics import harmonic_mean, neighbor_purity
from .nn import NetworkParams, apply_masked_update, backward_ce, forward, refresh_bn_stats
from .pipeline import (DomainClassifier, adapt_continual, adapt_target, evaluate,
                       pretrain_source, train_domain_classifier)
from .sda import DomainAttention, MaskSet, mask, merge_masks

__version__ = "0.1.0"

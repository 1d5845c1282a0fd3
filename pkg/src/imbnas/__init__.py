"""Supernet adaptation and architecture-ranking transfer under class imbalance.

A small numpy autograd drives a weight-sharing supernet over a cell search
space. Source-trained supernets are moved to long-tailed targets by one of four
procedures (P0 reuse, P1 classifier retrain, P2 fine-tune, P3 retrain), searched
by evolution, and checked by standalone retraining.
"""

__version__ = "0.1.0"

from .adaptation import PROCEDURES, AdaptProcedure, adapt, default_procedure, retrain_subnet_scratch
from .checkpoint import append_result, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import LabeledDataset, class_bins, gen_synthetic, longtail_profile, make_longtail, subsample
from .evolution import EvoConfig, evolve, exhaustive
from .losses import LossConfig, effective_number_weights, weighted_cross_entropy
from .pipeline import run_pipeline, run_transfer
from .ranking import dissect_accuracy, emit_grid, kendall_tau, rank_architectures, transfer_grid
from .space import CellArch, SearchSpaceSpec, count_flops, decode_arch, encode_arch, enumerate_space
from .supernet import Supernet, eval_subnet, init_supernet
from .training import CostMeter, CostReport, train_supernet

__all__ = [
    "PROCEDURES",
    "AdaptProcedure",
    "CellArch",
    "CostMeter",
    "CostReport",
    "EvoConfig",
    "ExperimentConfig",
    "LabeledDataset",
    "LossConfig",
    "SearchSpaceSpec",
    "Supernet",
    "adapt",
    "append_result",
    "class_bins",
    "count_flops",
    "decode_arch",
    "default_procedure",
    "dissect_accuracy",
    "effective_number_weights",
    "emit_grid",
    "encode_arch",
    "enumerate_space",
    "eval_subnet",
    "evolve",
    "exhaustive",
    "gen_synthetic",
    "init_supernet",
    "kendall_tau",
    "load_checkpoint",
    "load_config",
    "longtail_profile",
    "make_longtail",
    "rank_architectures",
    "retrain_subnet_scratch",
    "run_pipeline",
    "run_transfer",
    "save_checkpoint",
    "subsample",
    "train_supernet",
    "transfer_grid",
    "weighted_cross_entropy",
]

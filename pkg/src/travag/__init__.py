"""Differentially private synthesis of process-mining trace variants."""

from travag.accountant import (
    DpGuarantee,
    MechanismSpend,
    account_dpsgd,
    calibrate_phi,
    combine_mechanisms,
    subsampled_gaussian_rdp,
)
from travag.dp_optimizer import DpSgdConfig, RngStream, clip_gradient, dp_sgd_step
from travag.eventlog import SimpleEventLog, parse_event_csv, parse_variant_table
from travag.metrics import absolute_log_difference, relative_log_similarity
from travag.pipeline import TravagConfig, TrainedBundle, generate, grid_search, run_travag

__version__ = "0.1.0"

__all__ = [
    "DpGuarantee",
    "DpSgdConfig",
    "MechanismSpend",
    "RngStream",
    "SimpleEventLog",
    "TrainedBundle",
    "TravagConfig",
    "absolute_log_difference",
    "account_dpsgd",
    "calibrate_phi",
    "clip_gradient",
    "combine_mechanisms",
    "dp_sgd_step",
    "generate",
    "grid_search",
    "parse_event_csv",
    "parse_variant_table",
    "relative_log_similarity",
    "run_travag",
    "subsampled_gaussian_rdp",
]

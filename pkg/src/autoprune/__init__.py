"""Skew-aware sparsity allocation and metric-search pruning for small transformer bundles."""

from .metric import builtin, eval_metric, parse_metric, pretty_print
from .model import capture_calibration, fitness, forward, perplexity, reconstruction_error, sensitivity_sweep
from .pruner import MetricPruner, apply_mask, nm_mask, prune_model, unstructured_mask
from .sdsa import SparsityAllocator, SparsityPlan, allocate, beta_schedule, protection_weights, uniform_plan
from .stats import compute_activation_stats, magnitude_skewness, normalize_skewness, skewness_report
from .tensor import ModelBundle, TokenCorpus, Topology, load_bundle, load_corpus, save_bundle, save_corpus

__version__ = "0.1.0"

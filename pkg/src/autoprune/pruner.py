"""Mask construction (unstructured and N:M) and whole-bundle pruning."""

import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionMismatch, GroupMisaligned, MissingCalibration
from .metric import eval_metric, metric_label, resolve_metric, uses_activations
from .sdsa import SparsityAllocator, validate_plan
from .validation import check_fraction, check_matrix

GROUPS = ("per_row", "per_layer")
_ROUND_SLACK = 1e-9


def kept_count(keep_ratio, total):
    """``ceil(keep_ratio * total)``, tolerant of float noise such as 0.3 * 10."""
    return min(total, max(0, math.ceil(keep_ratio * total - _ROUND_SLACK)))


def _top_k_rows(scores, k):
    # stable sort on negated scores keeps the lower index first among ties
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def unstructured_mask(scores, keep_ratio, group="per_row"):
    scores = check_matrix(scores, "scores")
    keep_ratio = check_fraction(keep_ratio, "keep_ratio")
    if group == "per_row":
        return _top_k_rows(scores, kept_count(keep_ratio, scores.shape[1]))
    if group == "per_layer":
        flat = scores.reshape(1, -1)
        return _top_k_rows(flat, kept_count(keep_ratio, flat.shape[1])).reshape(scores.shape)
    raise ValueError(f"unknown comparison group {group!r}")


def nm_mask(scores, n_keep, m_group):
    """Keep the ``n_keep`` best of every aligned run of ``m_group`` columns in each row."""
    scores = check_matrix(scores, "scores")
    if not 0 < n_keep <= m_group:
        raise ValueError(f"need 0 < n_keep <= m_group, got {n_keep}:{m_group}")
    d_out, d_in = scores.shape
    if d_in % m_group:
        raise GroupMisaligned(f"d_in={d_in} is not divisible by group size {m_group}")
    grouped = scores.reshape(-1, m_group)
    return _top_k_rows(grouped, n_keep).reshape(d_out, d_in)


def apply_mask(W, mask):
    W = check_matrix(W, "W")
    mask = check_matrix(mask, "mask")
    if W.shape != mask.shape:
        raise DimensionMismatch(f"weight shape {W.shape} != mask shape {mask.shape}")
    return np.where(mask != 0, W, 0.0)


@dataclass(frozen=True)
class Unstructured:
    group: str = "per_row"

    def __str__(self):
        return f"unstructured({self.group})"


@dataclass(frozen=True)
class NM:
    n: int
    m: int

    def __str__(self):
        return f"{self.n}:{self.m}"


def parse_pattern(text, group="per_row"):
    if isinstance(text, (Unstructured, NM)):
        return text
    if text in (None, "unstructured"):
        return Unstructured(group)
    try:
        n, m = (int(v) for v in str(text).split(":"))
    except ValueError:
        raise ValueError(f"pattern must be 'unstructured' or 'N:M', got {text!r}") from None
    return NM(n, m)


@dataclass(frozen=True)
class LayerPruneRecord:
    layer: str
    requested_sparsity: float
    achieved_sparsity: float
    zeroed: int
    size: int


@dataclass(frozen=True)
class PruneReport:
    layers: tuple
    metric: str
    allocator: str
    pattern: str

    @property
    def overall_sparsity(self):
        total = sum(r.size for r in self.layers)
        return sum(r.zeroed for r in self.layers) / total

    def to_dict(self):
        return {
            "metric": self.metric,
            "allocator": self.allocator,
            "pattern": self.pattern,
            "overall_sparsity": self.overall_sparsity,
            "layers": [
                {
                    "layer": r.layer,
                    "requested_sparsity": r.requested_sparsity,
                    "achieved_sparsity": r.achieved_sparsity,
                    "zeroed": r.zeroed,
                    "size": r.size,
                }
                for r in self.layers
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def layer_scores(bundle, metric, stats):
    """Score matrix for every prunable layer, in bundle order."""
    expr = resolve_metric(metric)
    needs_x = uses_activations(expr)
    out = {}
    for rec in bundle.layers:
        layer_stats = None
        if stats is not None and rec.name in stats:
            layer_stats = stats[rec.name]
        elif needs_x:
            raise MissingCalibration(f"no calibration statistics for layer {rec.name}")
        out[rec.name] = eval_metric(expr, rec.weight, layer_stats)
    return out


def global_threshold_masks(scores, sparsity):
    """One cut over the concatenated scores of all layers; ties resolved by layer order then index."""
    names = list(scores)
    flat = np.concatenate([scores[n].ravel() for n in names])
    keep = kept_count(1.0 - sparsity, flat.size)
    order = np.argsort(-flat, kind="stable")[:keep]
    chosen = np.zeros(flat.size)
    chosen[order] = 1.0
    masks, start = {}, 0
    for n in names:
        size = scores[n].size
        masks[n] = chosen[start:start + size].reshape(scores[n].shape)
        start += size
    return masks


def compute_masks(bundle, plan, metric, stats, pattern=Unstructured()):
    pattern = parse_pattern(pattern)
    validate_plan(plan, bundle.layer_names)
    scores = layer_scores(bundle, metric, stats)
    if isinstance(pattern, NM):
        return {n: nm_mask(s, pattern.n, pattern.m) for n, s in scores.items()}
    if plan.allocator == "global_threshold":
        return global_threshold_masks(scores, plan.global_sparsity)
    return {n: unstructured_mask(s, plan[n].keep_ratio, pattern.group) for n, s in scores.items()}


def prune_model(bundle, plan, metric, stats=None, pattern=Unstructured()):
    """Mask every prunable layer; returns ``(pruned bundle, PruneReport)``.

    N:M patterns ignore the plan's per-layer ratios.
    """
    pattern = parse_pattern(pattern)
    masks = compute_masks(bundle, plan, metric, stats, pattern)
    new_weights, records = {}, []
    for rec in bundle.layers:
        pruned = apply_mask(rec.weight, masks[rec.name])
        new_weights[rec.name] = pruned
        zeroed = int(np.count_nonzero(masks[rec.name] == 0))
        requested = 1.0 - pattern.n / pattern.m if isinstance(pattern, NM) else plan[rec.name].sparsity
        records.append(LayerPruneRecord(rec.name, requested, zeroed / rec.size, zeroed, rec.size))
    report = PruneReport(tuple(records), metric_label(metric), plan.allocator, str(pattern))
    return bundle.with_weights(new_weights), report


class MetricPruner(BaseEstimator, TransformerMixin):
    """Score weights with a metric expression and mask them to a sparsity plan.

    ``fit(bundle, stats)`` allocates the plan and computes masks; ``transform``
    applies those masks to a bundle of the same topology.

    Parameters
    ----------
    metric : str
        Builtin name (``magnitude``, ``wanda``, ``autoprune``,
        ``sparsegpt_score``) or expression text.
    sparsity : float
    allocator : {"sdsa", "uniform", "global_threshold"}
    pattern : {"unstructured", "2:4", "4:8", ...}
    group : {"per_row", "per_layer"}
    contrast_cap, granularity : passed to :class:`SparsityAllocator`.
    """

    def __init__(
        self,
        metric="wanda",
        sparsity=0.5,
        allocator="sdsa",
        pattern="unstructured",
        group="per_row",
        contrast_cap=None,
        granularity="per_layer",
    ):
        self.metric = metric
        self.sparsity = sparsity
        self.allocator = allocator
        self.pattern = pattern
        self.group = group
        self.contrast_cap = contrast_cap
        self.granularity = granularity

    def fit(self, bundle, stats=None):
        alloc = SparsityAllocator(
            sparsity=self.sparsity,
            method=self.allocator,
            contrast_cap=self.contrast_cap,
            granularity=self.granularity,
        ).fit(bundle)
        self.plan_ = alloc.plan_
        self.metric_ = resolve_metric(self.metric)
        self.pattern_ = parse_pattern(self.pattern, self.group)
        self.masks_ = compute_masks(bundle, self.plan_, self.metric_, stats, self.pattern_)
        self.stats_ = stats
        return self

    def transform(self, bundle):
        check_is_fitted(self, "masks_")
        return bundle.with_weights({n: apply_mask(bundle.layer(n).weight, m) for n, m in self.masks_.items()})

    def fit_transform(self, bundle, stats=None):
        self.fit(bundle, stats)
        pruned, self.report_ = prune_model(bundle, self.plan_, self.metric_, stats, self.pattern_)
        return pruned

"""Skew-aware dynamic sparsity allocation.

Layers whose weight magnitudes are more positively skewed than the model
average get a larger share of the kept-weight budget. The share comes from
a softmax over normalized skewness whose temperature grows linearly with the
global sparsity, capped so that the largest/smallest protection ratio never
exceeds ``M``.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionMismatch, InvalidContrastCap, InvalidSparsity
from .stats import DEFAULT_EPS, block_units, skewness_report
from .validation import check_fraction

DEFAULT_M = {"per_layer": 1.8, "per_block": 1.5}
ALLOCATORS = ("sdsa", "uniform", "global_threshold", "manual")


def protection_weights(gamma_tilde, beta):
    g = np.asarray(gamma_tilde, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("protection_weights needs at least one layer")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    z = beta * g
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def beta_schedule(sparsity, contrast_cap, delta_gamma_tilde, eps=DEFAULT_EPS):
    """Softmax temperature ``S_g * ln(M) / (delta + eps)``."""
    sparsity = check_fraction(sparsity)
    if not contrast_cap > 1.0:
        raise InvalidContrastCap(f"contrast cap M must exceed 1, got {contrast_cap}")
    if delta_gamma_tilde < 0:
        raise ValueError("delta_gamma_tilde must be non-negative")
    return sparsity * np.log(contrast_cap) / (delta_gamma_tilde + eps)


@dataclass(frozen=True)
class PlanEntry:
    layer: str
    keep_ratio: float
    sparsity: float
    weight_count: int


@dataclass(frozen=True)
class SparsityPlan:
    entries: tuple
    global_sparsity: float
    allocator: str
    contrast_cap: float | None = None

    @property
    def names(self):
        return [e.layer for e in self.entries]

    @property
    def keep_ratios(self):
        return np.array([e.keep_ratio for e in self.entries])

    @property
    def sparsities(self):
        return np.array([e.sparsity for e in self.entries])

    @property
    def weight_counts(self):
        return np.array([e.weight_count for e in self.entries], dtype=np.int64)

    def __getitem__(self, name):
        for e in self.entries:
            if e.layer == name:
                return e
        raise KeyError(name)

    def effective_sparsity(self):
        n = self.weight_counts
        return float(np.dot(n, self.sparsities) / n.sum())

    def to_dict(self):
        return {
            "allocator": self.allocator,
            "global_sparsity": self.global_sparsity,
            "contrast_cap": self.contrast_cap,
            "entries": [
                {"layer": e.layer, "n": e.weight_count, "keep_ratio": e.keep_ratio, "sparsity": e.sparsity}
                for e in self.entries
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "n", "keep_ratio", "sparsity"])
        for e in self.entries:
            w.writerow([e.layer, e.weight_count, repr(e.keep_ratio), repr(e.sparsity)])
        return buf.getvalue()


def _entries(names, keep, sizes):
    keep = np.clip(keep, 0.0, 1.0)
    return tuple(
        PlanEntry(n, float(k), float(1.0 - k), int(c)) for n, k, c in zip(names, keep, sizes)
    )


def _check_sizes(sizes, n_units):
    sizes = np.asarray(sizes, dtype=np.int64).ravel()
    if sizes.size != n_units:
        raise DimensionMismatch(f"{sizes.size} layer sizes for {n_units} report entries")
    if np.any(sizes <= 0):
        raise ValueError("layer sizes must be positive")
    return sizes


def water_fill(raw_keep, weights, sizes, budget):
    """Clip keep ratios at 1 and hand the surplus to unclipped layers in proportion to ``weights``.

    ``budget`` is the total number of weights to keep.
    """
    keep = np.array(raw_keep, dtype=np.float64)
    n = sizes.astype(np.float64)
    clipped = np.zeros(keep.size, dtype=bool)
    for _ in range(keep.size + 1):
        over = (keep > 1.0) & ~clipped
        if not over.any():
            break
        clipped |= over
        keep[clipped] = 1.0
        free = ~clipped
        if not free.any():
            break
        remaining = budget - n[clipped].sum()
        keep[free] = remaining * weights[free] / np.dot(n[free], weights[free])
    return keep


def allocate(report, layer_sizes, sparsity, contrast_cap=None, eps=DEFAULT_EPS):
    """Per-unit keep ratios from a skewness report; preserves the global budget exactly."""
    sparsity = check_fraction(sparsity, allow_one=False)
    if contrast_cap is None:
        contrast_cap = DEFAULT_M.get(report.granularity, 1.8)
    sizes = _check_sizes(layer_sizes, len(report.per_layer))
    beta = beta_schedule(sparsity, contrast_cap, report.delta_gamma_tilde, eps)
    omega = protection_weights(report.gamma_tilde, beta)
    n = sizes.astype(np.float64)
    omega_bar = np.dot(n, omega) / n.sum()
    raw = (1.0 - sparsity) * omega / omega_bar
    keep = water_fill(raw, omega, sizes, (1.0 - sparsity) * n.sum())
    return SparsityPlan(_entries(report.names, keep, sizes), sparsity, "sdsa", float(contrast_cap))


def uniform_plan(layer_sizes, sparsity, names=None):
    sparsity = check_fraction(sparsity)
    sizes = np.asarray(layer_sizes, dtype=np.int64).ravel()
    if names is None:
        names = [f"layer{i}" for i in range(sizes.size)]
    keep = np.full(sizes.size, 1.0 - sparsity)
    return SparsityPlan(_entries(names, keep, sizes), sparsity, "uniform")


def manual_plan(layer_sizes, sparsities, names):
    """Plan with explicitly chosen per-layer sparsities (used by sensitivity sweeps)."""
    sizes = np.asarray(layer_sizes, dtype=np.int64).ravel()
    s = np.array([check_fraction(v) for v in sparsities])
    n = sizes.astype(np.float64)
    return SparsityPlan(_entries(names, 1.0 - s, sizes), float(np.dot(n, s) / n.sum()), "manual")


def expand_block_plan(plan, bundle):
    """Map a per-block plan onto the prunable layers of each block."""
    ratio = {e.layer: e.keep_ratio for e in plan.entries}
    entries = []
    for unit, members in block_units(bundle):
        for name in members:
            k = ratio[unit]
            entries.append(PlanEntry(name, k, 1.0 - k, bundle.layer(name).size))
    return SparsityPlan(tuple(entries), plan.global_sparsity, plan.allocator, plan.contrast_cap)


class SparsityAllocator(BaseEstimator):
    """Estimator wrapper producing a layer-level :class:`SparsityPlan` for a bundle.

    Parameters
    ----------
    sparsity : float
        Global fraction of prunable weights to remove.
    method : {"sdsa", "uniform", "global_threshold"}
        ``global_threshold`` yields a nominal uniform plan tagged so that the
        pruner applies one score cut across all layers instead.
    contrast_cap : float or None
        Bound on the largest/smallest protection ratio; ``None`` picks 1.8
        per layer or 1.5 per block.
    granularity : {"per_layer", "per_block"}
    eps : float
    """

    def __init__(self, sparsity=0.5, method="sdsa", contrast_cap=None, granularity="per_layer", eps=DEFAULT_EPS):
        self.sparsity = sparsity
        self.method = method
        self.contrast_cap = contrast_cap
        self.granularity = granularity
        self.eps = eps

    def fit(self, bundle, y=None):
        if self.method not in ("sdsa", "uniform", "global_threshold"):
            raise ValueError(f"unknown allocator {self.method!r}")
        if self.method == "sdsa":
            self.report_ = skewness_report(bundle, self.granularity, self.eps)
            if self.granularity == "per_layer":
                sizes = bundle.layer_sizes
            else:
                sizes = [sum(bundle.layer(n).size for n in members) for _, members in block_units(bundle)]
            plan = allocate(self.report_, sizes, self.sparsity, self.contrast_cap, self.eps)
            if self.granularity == "per_block":
                plan = expand_block_plan(plan, bundle)
        else:
            plan = uniform_plan(bundle.layer_sizes, self.sparsity, bundle.layer_names)
            if self.method == "global_threshold":
                plan = SparsityPlan(plan.entries, plan.global_sparsity, "global_threshold")
        self.plan_ = plan
        return self

    def predict(self, bundle=None):
        """Per-layer sparsities of the fitted plan."""
        check_is_fitted(self, "plan_")
        return self.plan_.sparsities


def validate_plan(plan, names):
    missing = set(names) - set(plan.names)
    if missing:
        raise InvalidSparsity(f"plan does not cover layers {sorted(missing)}")

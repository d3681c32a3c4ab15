"""Magnitude skewness, its cross-layer normalization and activation statistics."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, SingularGram
from .validation import check_matrix, frozen

DEGENERATE_M2 = 1e-24
DEFAULT_EPS = 1e-8
HESSIAN_DAMPING = 0.01


def magnitude_skewness(values):
    """Biased sample skewness of ``|values|``.

    Constant magnitudes (second central moment below 1e-24) yield 0.
    """
    a = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("magnitude_skewness needs at least one value")
    centered = a - a.mean()
    m2 = np.mean(centered * centered)
    if m2 < DEGENERATE_M2:
        return 0.0
    m3 = np.mean(centered * centered * centered)
    return float(m3 / m2**1.5)


def normalize_skewness(gammas, eps=DEFAULT_EPS):
    """Center on the mean and divide by the largest absolute deviation (+eps)."""
    g = np.asarray(gammas, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("normalize_skewness needs at least one layer")
    mean = g.mean()
    spread = np.max(np.abs(g - mean))
    return (g - mean) / (spread + eps), float(mean), float(spread)


@dataclass(frozen=True)
class SkewnessEntry:
    layer: str
    gamma: float
    gamma_tilde: float


@dataclass(frozen=True)
class SkewnessReport:
    per_layer: tuple
    mean_gamma: float
    delta_gamma: float
    delta_gamma_tilde: float
    granularity: str = "per_layer"

    @property
    def names(self):
        return [e.layer for e in self.per_layer]

    @property
    def gammas(self):
        return np.array([e.gamma for e in self.per_layer])

    @property
    def gamma_tilde(self):
        return np.array([e.gamma_tilde for e in self.per_layer])

    @classmethod
    def from_gammas(cls, names, gammas, eps=DEFAULT_EPS, granularity="per_layer"):
        tilde, mean, spread = normalize_skewness(gammas, eps)
        entries = tuple(
            SkewnessEntry(n, float(g), float(t)) for n, g, t in zip(names, np.asarray(gammas), tilde)
        )
        return cls(entries, mean, spread, float(tilde.max() - tilde.min()), granularity)

    def to_dict(self):
        return {
            "granularity": self.granularity,
            "mean_gamma": self.mean_gamma,
            "delta_gamma": self.delta_gamma,
            "delta_gamma_tilde": self.delta_gamma_tilde,
            "per_layer": [
                {"layer": e.layer, "gamma": e.gamma, "gamma_tilde": e.gamma_tilde}
                for e in self.per_layer
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "gamma", "gamma_tilde"])
        for e in self.per_layer:
            w.writerow([e.layer, repr(e.gamma), repr(e.gamma_tilde)])
        return buf.getvalue()


def block_units(bundle):
    """Group layer names by transformer block: ``[(unit name, [layer names])]``."""
    units = {}
    for rec in bundle.layers:
        units.setdefault(f"blocks.{rec.block}", []).append(rec.name)
    return list(units.items())


def skewness_report(bundle, granularity="per_layer", eps=DEFAULT_EPS):
    if granularity == "per_layer":
        names = bundle.layer_names
        gammas = [magnitude_skewness(r.weight) for r in bundle.layers]
    elif granularity == "per_block":
        units = block_units(bundle)
        names = [u for u, _ in units]
        gammas = [
            magnitude_skewness(np.concatenate([bundle.layer(n).weight.ravel() for n in members]))
            for _, members in units
        ]
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return SkewnessReport.from_gammas(names, gammas, eps, granularity)


@dataclass(frozen=True)
class LayerActivationStats:
    col_l1: np.ndarray = field(repr=False)
    col_l2: np.ndarray = field(repr=False)
    col_l2sq: np.ndarray = field(repr=False)
    hess_diag: np.ndarray | None = field(default=None, repr=False)
    raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def d_in(self):
        return self.col_l1.shape[0]


@dataclass(frozen=True)
class ActivationStats:
    per_layer: dict

    def __getitem__(self, name):
        return self.per_layer[name]

    def __contains__(self, name):
        return name in self.per_layer

    def has_raw(self):
        return all(s.raw is not None for s in self.per_layer.values())


def hessian_inverse_diag(X, lam=None):
    """``diag[(X^T X + lam I)^-1]`` over the input-feature Gram matrix.

    ``lam=None`` uses 1% of the mean Gram diagonal.
    """
    gram = X.T @ X
    if lam is None:
        lam = HESSIAN_DAMPING * float(np.mean(np.diag(gram)))
    gram = gram + lam * np.eye(gram.shape[0])
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularGram(f"Gram matrix + {lam}*I is not positive definite") from exc
    if np.min(np.abs(np.diag(chol))) <= 1e-150:
        raise SingularGram("Gram matrix is numerically singular")
    inv_l = np.linalg.inv(chol)
    diag = np.sum(inv_l * inv_l, axis=0)
    if not np.all(np.isfinite(diag)):
        raise SingularGram("Gram inverse is not finite")
    return diag


def layer_activation_stats(X, lam=None, keep_raw=False, with_hessian=False):
    X = check_matrix(X, "activations")
    l1 = np.sum(np.abs(X), axis=0)
    l2sq = np.sum(X * X, axis=0)
    hess = hessian_inverse_diag(X, lam) if with_hessian else None
    return LayerActivationStats(
        col_l1=frozen(l1),
        col_l2=frozen(np.sqrt(l2sq)),
        col_l2sq=frozen(l2sq),
        hess_diag=None if hess is None else frozen(hess),
        raw=frozen(X.copy()) if keep_raw else None,
    )


def compute_activation_stats(raw_activations, lam=None, keep_raw=False, with_hessian=False, d_in=None):
    """Column norms (and optionally the Hessian-inverse diagonal) per layer.

    ``raw_activations`` maps layer name to an ``n_tokens x d_in`` matrix.
    ``d_in`` optionally maps layer name to the expected column count.
    """
    out = {}
    for name, X in raw_activations.items():
        X = check_matrix(X, f"activations[{name}]")
        if d_in is not None and X.shape[1] != d_in[name]:
            raise DimensionMismatch(f"{name}: activations have {X.shape[1]} columns, layer expects {d_in[name]}")
        out[name] = layer_activation_stats(X, lam, keep_raw, with_hessian)
    return ActivationStats(out)

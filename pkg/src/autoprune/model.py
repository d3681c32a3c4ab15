"""Float64 reference forward pass of the tiny decoder, plus the fitness signals.

Architecture (pre-norm)::

    h = embedding[tokens] + pos_embedding[:T]
    for each block:
        h = h + o(attention(q, k, v of layernorm1(h)))
        h = h + mlp_out(gelu(mlp_in(layernorm2(h))))
    logits = layernorm_final(h) @ head.T
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InsufficientCorpus, MissingCalibration, WindowTooLong
from .metric import metric_label
from .pruner import Unstructured, prune_model
from .sdsa import manual_plan
from .stats import compute_activation_stats
from .tensor import LAYER_KINDS, ModelBundle, TokenCorpus, Topology, layer_name
from .validation import check_fraction, check_matrix

LN_EPS = 1e-5
GELU_C = 0.7978845608
GELU_A = 0.044715


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def layer_norm(x, scale, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * scale + bias


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_window(bundle, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise DimensionMismatch("token window must be a non-empty 1-D array")
    topo = bundle.topology
    if tokens.size > topo.max_seq_len:
        raise WindowTooLong(f"window of {tokens.size} tokens exceeds max_seq_len {topo.max_seq_len}")
    TokenCorpus(np.concatenate([tokens, tokens[:1]])).check_vocab(topo.vocab_size)
    return tokens.astype(np.int64)


def _run(bundle, tokens, capture=None):
    topo = bundle.topology
    aux = bundle.aux
    T = tokens.size
    n_h = topo.n_heads
    d_h = topo.d_model // n_h
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)

    h = aux["embedding"][tokens] + aux["pos_embedding"][:T]
    for b in range(topo.n_blocks):
        W = {k: bundle.layer(layer_name(b, k)).weight for k in LAYER_KINDS}
        x = layer_norm(h, aux[f"blocks.{b}.ln1.scale"], aux[f"blocks.{b}.ln1.bias"])
        q = (x @ W["attention_q"].T).reshape(T, n_h, d_h).transpose(1, 0, 2)
        k = (x @ W["attention_k"].T).reshape(T, n_h, d_h).transpose(1, 0, 2)
        v = (x @ W["attention_v"].T).reshape(T, n_h, d_h).transpose(1, 0, 2)
        att = q @ k.transpose(0, 2, 1) / np.sqrt(d_h)
        att = np.where(causal, -np.inf, att)
        ctx = (_softmax_rows(att) @ v).transpose(1, 0, 2).reshape(T, topo.d_model)
        h = h + ctx @ W["attention_o"].T

        x2 = layer_norm(h, aux[f"blocks.{b}.ln2.scale"], aux[f"blocks.{b}.ln2.bias"])
        hidden = gelu(x2 @ W["mlp_in"].T)
        h = h + hidden @ W["mlp_out"].T

        if capture is not None:
            for kind, inp in (
                ("attention_q", x),
                ("attention_k", x),
                ("attention_v", x),
                ("attention_o", ctx),
                ("mlp_in", x2),
                ("mlp_out", hidden),
            ):
                capture.setdefault(layer_name(b, kind), []).append(inp)

    h = layer_norm(h, aux["final_norm.scale"], aux["final_norm.bias"])
    return h @ bundle.head().T


def forward(bundle, tokens):
    """Logits (``len(tokens) x vocab_size``) for one token window."""
    return _run(bundle, _check_window(bundle, tokens))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def eval_windows(corpus, seq_len, max_windows=None):
    """Non-overlapping windows (stride ``seq_len``) of ``(inputs, targets)``."""
    toks = np.asarray(corpus.tokens, dtype=np.int64)
    out = []
    for start in range(0, toks.size - 1, seq_len):
        chunk = toks[start:start + seq_len + 1]
        if chunk.size < 2:
            break
        out.append((chunk[:-1], chunk[1:]))
        if max_windows is not None and len(out) >= max_windows:
            break
    return out


def perplexity(bundle, corpus, seq_len=64, max_windows=None):
    corpus.check_vocab(bundle.topology.vocab_size)
    nll, count = 0.0, 0
    for inputs, targets in eval_windows(corpus, seq_len, max_windows):
        logp = _log_softmax(forward(bundle, inputs))
        nll -= float(logp[np.arange(targets.size), targets].sum())
        count += targets.size
    return float(np.exp(nll / count))


def calibration_windows(corpus, n_samples, seq_len, seed=None):
    n_full = len(corpus) // seq_len
    if n_full < n_samples:
        raise InsufficientCorpus(
            f"corpus of {len(corpus)} tokens has {n_full} windows of {seq_len}, need {n_samples}"
        )
    if seed is None:
        idx = np.arange(n_samples)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n_full, size=n_samples, replace=False))
    toks = np.asarray(corpus.tokens, dtype=np.int64)
    return [toks[i * seq_len:(i + 1) * seq_len] for i in idx]


def capture_activations(bundle, corpus, n_samples=128, seq_len=64, seed=None):
    """Raw input activations per prunable layer, rows concatenated in window order."""
    corpus.check_vocab(bundle.topology.vocab_size)
    capture = {}
    for window in calibration_windows(corpus, n_samples, seq_len, seed):
        _run(bundle, _check_window(bundle, window), capture)
    return {name: np.concatenate(chunks, axis=0) for name, chunks in capture.items()}


def capture_calibration(
    bundle, corpus, n_samples=128, seq_len=64, seed=None, keep_raw=False, with_hessian=False, lam=None
):
    raw = capture_activations(bundle, corpus, n_samples, seq_len, seed)
    d_in = {r.name: r.shape[1] for r in bundle.layers}
    return compute_activation_stats(raw, lam=lam, keep_raw=keep_raw, with_hessian=with_hessian, d_in=d_in)


def reconstruction_error(W, W_pruned, X):
    """Frobenius norm of ``X W^T - X W_pruned^T``."""
    W = check_matrix(W, "W")
    W_pruned = check_matrix(W_pruned, "W_pruned")
    X = check_matrix(X, "X")
    if W.shape != W_pruned.shape or X.shape[1] != W.shape[1]:
        raise DimensionMismatch(f"shapes W {W.shape}, W_pruned {W_pruned.shape}, X {X.shape} disagree")
    return float(np.linalg.norm(X @ (W - W_pruned).T))


@dataclass(frozen=True)
class FitnessResult:
    mode: str
    value: float
    per_layer_breakdown: dict | None = field(default=None)

    def to_dict(self):
        return {"mode": self.mode, "value": self.value, "per_layer_breakdown": self.per_layer_breakdown}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


FITNESS_MODES = ("reconstruction", "perplexity")


def pruned_fitness(original, pruned, stats=None, mode="reconstruction", eval_corpus=None, seq_len=64, max_windows=None):
    """Fitness of an already-pruned bundle relative to its dense original."""
    if mode == "reconstruction":
        if stats is None or not stats.has_raw():
            raise MissingCalibration("reconstruction fitness needs calibration statistics with raw activations")
        breakdown = {
            rec.name: reconstruction_error(rec.weight, pruned.layer(rec.name).weight, stats[rec.name].raw)
            for rec in original.layers
        }
        return FitnessResult(mode, float(sum(breakdown.values())), breakdown)
    if mode == "perplexity":
        if eval_corpus is None:
            raise MissingCalibration("perplexity fitness needs an evaluation corpus")
        return FitnessResult(mode, perplexity(pruned, eval_corpus, seq_len, max_windows))
    raise ValueError(f"unknown fitness mode {mode!r}")


def fitness(
    bundle,
    plan,
    metric,
    stats,
    mode="reconstruction",
    pattern=Unstructured(),
    eval_corpus=None,
    seq_len=64,
    max_windows=None,
):
    """Prune a copy of ``bundle`` and score it (lower is better)."""
    pruned, _ = prune_model(bundle, plan, metric, stats, pattern)
    return pruned_fitness(bundle, pruned, stats, mode, eval_corpus, seq_len, max_windows)


@dataclass(frozen=True)
class SensitivityRow:
    layer: str
    probe_ratio: float
    background_ratio: float
    fitness: float


@dataclass(frozen=True)
class SensitivityTable:
    rows: tuple
    metric: str = ""
    mode: str = "reconstruction"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "probe_ratio", "background_ratio", "fitness"])
        for r in self.rows:
            w.writerow([r.layer, repr(r.probe_ratio), repr(r.background_ratio), repr(r.fitness)])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(
            {
                "metric": self.metric,
                "mode": self.mode,
                "rows": [r.__dict__ for r in self.rows],
            },
            indent=2,
        )

    def lookup(self, layer, probe):
        for r in self.rows:
            if r.layer == layer and r.probe_ratio == probe:
                return r.fitness
        raise KeyError((layer, probe))


def sensitivity_sweep(
    bundle,
    stats,
    metric,
    target_layers,
    probe_ratios,
    background_ratio,
    mode="reconstruction",
    eval_corpus=None,
    seq_len=64,
    max_windows=None,
):
    """Fitness with one layer at each probe ratio and all others at ``background_ratio``."""
    background_ratio = check_fraction(background_ratio, "background_ratio")
    probes = [check_fraction(p, "probe_ratio") for p in probe_ratios]
    names = bundle.layer_names
    for t in target_layers:
        if t not in names:
            raise KeyError(f"unknown layer {t!r}")
    rows = []
    for target in target_layers:
        for probe in probes:
            ratios = [probe if n == target else background_ratio for n in names]
            plan = manual_plan(bundle.layer_sizes, ratios, names)
            res = fitness(bundle, plan, metric, stats, mode, Unstructured(), eval_corpus, seq_len, max_windows)
            rows.append(SensitivityRow(target, probe, background_ratio, res.value))
    return SensitivityTable(tuple(rows), metric_label(metric), mode)


def init_bundle(topology, seed=0, scale=0.02):
    """Randomly initialised bundle (normal weights, unit layer norms)."""
    if not isinstance(topology, Topology):
        topology = Topology(**topology)
    rng = np.random.default_rng(seed)
    d = topology.d_model
    layers = [
        rng.normal(0.0, scale, topology.layer_shape(k)) for _ in range(topology.n_blocks) for k in LAYER_KINDS
    ]
    aux = {}
    for name, shape in topology.aux_shapes().items():
        if name.endswith(".scale"):
            aux[name] = np.ones(shape)
        elif name.endswith(".bias"):
            aux[name] = np.zeros(shape)
        else:
            aux[name] = rng.normal(0.0, scale if name != "embedding" else 1.0 / np.sqrt(d), shape)
    return ModelBundle(topology, layers, aux)

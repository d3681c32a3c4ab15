"""Command-line entry point: ``autoprune <subcommand> [flags]``.

Settings come from an optional JSON config file (``--config``), overridden by
flags. Every command writes ``run_config.json`` (the resolved settings) into
the output directory, and JSON reports embed the same settings.
"""

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import AutoPruneError, ConfigError
from .gcot.search import SearchConfig, run_search
from .metric import metric_label, resolve_metric, terminals, uses_activations
from .model import FITNESS_MODES, capture_calibration, fitness, sensitivity_sweep
from .pruner import GROUPS, parse_pattern, prune_model
from .sdsa import SparsityAllocator
from .stats import skewness_report
from .tensor import load_bundle, load_corpus, save_bundle

logger = logging.getLogger("autoprune")

COMMANDS = ("analyze", "allocate", "prune", "eval", "sensitivity", "search", "bench")
BENCH_METRICS = ("magnitude", "wanda", "autoprune")
BENCH_ALLOCATORS = ("uniform", "sdsa", "global_threshold")

_ALLOCATOR_ALIASES = {"global": "global_threshold"}
_GROUP_ALIASES = {"row": "per_row", "layer": "per_layer"}
_FITNESS_ALIASES = {"recon": "reconstruction", "ppl": "perplexity"}
# keys shared by the run config and the search config; the search inherits them
_INHERITED = {
    "sparsity": "sparsity",
    "fitness": "fitness_mode",
    "allocator": "allocator",
    "pattern": "pattern",
    "group": "group",
    "seq_len": "seq_len",
    "max_windows": "max_windows",
    "seed": "seed",
}


@dataclass
class RunConfig:
    bundle: str | None = None
    calib: str | None = None
    eval_corpus: str | None = None
    sparsity: float = 0.5
    contrast_cap: float | None = None
    granularity: str = "per_layer"
    allocator: str = "sdsa"
    metric: str = "wanda"
    pattern: str = "unstructured"
    group: str = "per_row"
    fitness: str = "reconstruction"
    n_samples: int = 128
    seq_len: int = 64
    max_windows: int | None = None
    out: str = "out"
    seed: int = 0
    bench_sparsities: list = field(default_factory=lambda: [0.5, 0.6, 0.7])
    target_layers: list | None = None
    probe_ratios: list = field(default_factory=lambda: [0.0, 0.5])
    background_ratio: float = 0.7
    search: dict = field(default_factory=dict)

    def to_dict(self):
        # the output location is not part of a run's provenance
        d = asdict(self)
        del d["out"]
        return d


def _fraction(value, path, allow_one=False):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if not (0.0 <= v < 1.0 or (allow_one and v == 1.0)):
        raise ConfigError(f"{path}: must lie in [0, 1{']' if allow_one else ')'}, got {v}")
    return v


def _positive_int(value, path, optional=False):
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{path}: must be a positive integer, got {value!r}")
    return value


def _choice(value, choices, aliases, path):
    value = aliases.get(value, value)
    if value not in choices:
        raise ConfigError(f"{path}: expected one of {sorted(choices)}, got {value!r}")
    return value


def validate(cfg):
    """Normalise aliases and check ranges in place; raises ConfigError with a field path."""
    cfg.sparsity = _fraction(cfg.sparsity, "sparsity")
    if cfg.contrast_cap is not None and not float(cfg.contrast_cap) > 1.0:
        raise ConfigError(f"contrast_cap: must exceed 1, got {cfg.contrast_cap}")
    cfg.granularity = _choice(cfg.granularity, ("per_layer", "per_block"), {}, "granularity")
    cfg.allocator = _choice(cfg.allocator, BENCH_ALLOCATORS, _ALLOCATOR_ALIASES, "allocator")
    cfg.group = _choice(cfg.group, GROUPS, _GROUP_ALIASES, "group")
    cfg.fitness = _choice(cfg.fitness, FITNESS_MODES, _FITNESS_ALIASES, "fitness")
    try:
        parse_pattern(cfg.pattern, cfg.group)
    except ValueError as exc:
        raise ConfigError(f"pattern: {exc}") from None
    try:
        resolve_metric(cfg.metric)
    except AutoPruneError as exc:
        raise ConfigError(f"metric: {exc}") from None
    _positive_int(cfg.n_samples, "n_samples")
    _positive_int(cfg.seq_len, "seq_len")
    _positive_int(cfg.max_windows, "max_windows", optional=True)
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int):
        raise ConfigError(f"seed: must be an integer, got {cfg.seed!r}")
    cfg.bench_sparsities = [_fraction(s, f"bench_sparsities.{i}") for i, s in enumerate(cfg.bench_sparsities)]
    cfg.probe_ratios = [_fraction(s, f"probe_ratios.{i}", True) for i, s in enumerate(cfg.probe_ratios)]
    cfg.background_ratio = _fraction(cfg.background_ratio, "background_ratio", True)
    for key in ("bundle", "calib", "eval_corpus"):
        path = getattr(cfg, key)
        if path is not None and not Path(path).exists():
            raise ConfigError(f"{key}: path {path!r} does not exist")
    if not isinstance(cfg.search, dict):
        raise ConfigError("search: must be an object")
    return cfg


def search_config(cfg, explicit=()):
    """SearchConfig inheriting run-level settings unless the search block sets them.

    Keys listed in ``explicit`` were given as flags and win over the search block.
    """
    merged = {dst: getattr(cfg, src) for src, dst in _INHERITED.items()}
    merged["sparsity"] = merged["sparsity"] or 0.5
    merged.update(cfg.search)
    for src in explicit:
        if src in _INHERITED:
            merged[_INHERITED[src]] = getattr(cfg, src)
    merged["allocator"] = _ALLOCATOR_ALIASES.get(merged["allocator"], merged["allocator"])
    merged["group"] = _GROUP_ALIASES.get(merged["group"], merged["group"])
    merged["fitness_mode"] = _FITNESS_ALIASES.get(merged["fitness_mode"], merged["fitness_mode"])
    try:
        return SearchConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError(f"search: {exc}") from None


def _flag_overrides(args):
    out = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            out[f.name] = value
    if getattr(args, "metric_expr", None) is not None:
        out["metric"] = args.metric_expr
    return out


def resolve_config(args):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be an object")
        unknown = sorted(set(data) - {f.name for f in fields(RunConfig)})
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
    flags = _flag_overrides(args)
    cfg = validate(RunConfig(**{**data, **flags}))
    return cfg, tuple(flags)


# ---------------------------------------------------------------- helpers


def _require(cfg, *keys):
    for key in keys:
        if getattr(cfg, key) is None:
            raise ConfigError(f"{key}: required for this command")


def _write(out, name, text):
    path = Path(out) / name
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    return path


def _report(cfg, payload):
    return json.dumps({"config": cfg.to_dict(), **payload}, indent=2)


def _stats_for(cfg, bundle, metrics, need_raw):
    exprs = [resolve_metric(m) for m in metrics]
    if not need_raw and not any(uses_activations(e) for e in exprs):
        return None
    _require(cfg, "calib")
    hess = any("hessdiag" in terminals(e) for e in exprs)
    corpus = load_corpus(cfg.calib)
    return capture_calibration(
        bundle, corpus, cfg.n_samples, cfg.seq_len, seed=cfg.seed, keep_raw=need_raw, with_hessian=hess
    )


def _eval_corpus(cfg):
    if cfg.fitness == "perplexity":
        _require(cfg, "eval_corpus")
        return load_corpus(cfg.eval_corpus)
    return None


def _plan(cfg, bundle, sparsity=None, allocator=None):
    alloc = SparsityAllocator(
        sparsity=cfg.sparsity if sparsity is None else sparsity,
        method=allocator or cfg.allocator,
        contrast_cap=cfg.contrast_cap,
        granularity=cfg.granularity,
    ).fit(bundle)
    return alloc


def _fitness_value(cfg, bundle, plan, metric, stats, eval_corpus):
    return fitness(
        bundle,
        plan,
        metric,
        stats,
        cfg.fitness,
        parse_pattern(cfg.pattern, cfg.group),
        eval_corpus,
        cfg.seq_len,
        cfg.max_windows,
    )


# ---------------------------------------------------------------- commands


def cmd_analyze(cfg, explicit):
    _require(cfg, "bundle")
    bundle = load_bundle(cfg.bundle)
    report = skewness_report(bundle, cfg.granularity)
    _write(cfg.out, "skewness.csv", report.to_csv())
    _write(cfg.out, "skewness.json", _report(cfg, {"skewness": report.to_dict()}))


def cmd_allocate(cfg, explicit):
    _require(cfg, "bundle")
    bundle = load_bundle(cfg.bundle)
    plan = _plan(cfg, bundle).plan_
    _write(cfg.out, "plan.csv", plan.to_csv())
    _write(cfg.out, "plan.json", _report(cfg, {"plan": plan.to_dict()}))


def cmd_prune(cfg, explicit):
    _require(cfg, "bundle")
    bundle = load_bundle(cfg.bundle)
    stats = _stats_for(cfg, bundle, [cfg.metric], need_raw=False)
    plan = _plan(cfg, bundle).plan_
    pruned, report = prune_model(bundle, plan, cfg.metric, stats, parse_pattern(cfg.pattern, cfg.group))
    save_bundle(pruned, Path(cfg.out) / "bundle")
    _write(cfg.out, "prune_report.json", _report(cfg, {"prune": report.to_dict()}))


def cmd_eval(cfg, explicit):
    _require(cfg, "bundle")
    bundle = load_bundle(cfg.bundle)
    stats = _stats_for(cfg, bundle, [cfg.metric], need_raw=cfg.fitness == "reconstruction")
    plan = _plan(cfg, bundle).plan_
    result = _fitness_value(cfg, bundle, plan, cfg.metric, stats, _eval_corpus(cfg))
    _write(cfg.out, "fitness.json", _report(cfg, {"fitness": result.to_dict()}))


def cmd_sensitivity(cfg, explicit):
    _require(cfg, "bundle")
    bundle = load_bundle(cfg.bundle)
    stats = _stats_for(cfg, bundle, [cfg.metric], need_raw=cfg.fitness == "reconstruction")
    targets = cfg.target_layers or bundle.layer_names
    try:
        table = sensitivity_sweep(
            bundle,
            stats,
            cfg.metric,
            targets,
            cfg.probe_ratios,
            cfg.background_ratio,
            cfg.fitness,
            _eval_corpus(cfg),
            cfg.seq_len,
            cfg.max_windows,
        )
    except KeyError as exc:
        raise ConfigError(f"target_layers: unknown layer {exc.args[0]!r}") from None
    _write(cfg.out, "sensitivity.csv", table.to_csv())
    _write(cfg.out, "sensitivity.json", _report(cfg, {"sensitivity": json.loads(table.to_json())}))


def cmd_search(cfg, explicit):
    _require(cfg, "bundle")
    scfg = search_config(cfg, explicit)
    bundle = load_bundle(cfg.bundle)
    need_raw = scfg.fitness_mode == "reconstruction"
    if need_raw or any(uses_activations(resolve_metric(c)) for c in scfg.fixture_candidates):
        _require(cfg, "calib")
        stats = capture_calibration(
            bundle, load_corpus(cfg.calib), cfg.n_samples, cfg.seq_len, seed=cfg.seed, keep_raw=need_raw
        )
    else:
        stats = None
    eval_corpus = None
    if scfg.fitness_mode == "perplexity":
        _require(cfg, "eval_corpus")
        eval_corpus = load_corpus(cfg.eval_corpus)
    graph = run_search(bundle, stats, eval_corpus, scfg, out_path=Path(cfg.out) / "graph.json")
    best = graph.candidate(graph.best)
    _write(cfg.out, "best_metric.txt", best.expression)
    _write(
        cfg.out,
        "search_report.json",
        _report(cfg, {"search_config": scfg.to_dict(), "best": best.to_dict()}),
    )


def bench_metrics(cfg):
    """The three builtins, plus the configured metric when it is something else."""
    names = list(BENCH_METRICS)
    extra = cfg.metric
    if metric_label(resolve_metric(extra)) not in names:
        names.append(extra)
    return names


def cmd_bench(cfg, explicit):
    _require(cfg, "bundle")
    bundle = load_bundle(cfg.bundle)
    metrics = bench_metrics(cfg)
    stats = _stats_for(cfg, bundle, metrics, need_raw=cfg.fitness == "reconstruction")
    eval_corpus = _eval_corpus(cfg)
    rows = []
    for s in cfg.bench_sparsities:
        for allocator in BENCH_ALLOCATORS:
            plan = _plan(cfg, bundle, sparsity=s, allocator=allocator).plan_
            for m in metrics:
                res = _fitness_value(cfg, bundle, plan, m, stats, eval_corpus)
                rows.append([repr(s), allocator, metric_label(resolve_metric(m)), cfg.fitness, repr(res.value)])
                logger.info("bench S=%s %s %s -> %.6g", s, allocator, m, res.value)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sparsity", "allocator", "metric", "fitness_mode", "fitness"])
    w.writerows(rows)
    _write(cfg.out, "bench.csv", buf.getvalue())
    table = [dict(zip(("sparsity", "allocator", "metric", "fitness_mode", "fitness"), r)) for r in rows]
    _write(cfg.out, "bench.json", _report(cfg, {"bench": table}))


HANDLERS = {
    "analyze": cmd_analyze,
    "allocate": cmd_allocate,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "sensitivity": cmd_sensitivity,
    "search": cmd_search,
    "bench": cmd_bench,
}


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--bundle", help="model bundle directory")
    common.add_argument("--calib", help="calibration token corpus")
    common.add_argument("--eval-corpus", dest="eval_corpus", help="evaluation token corpus")
    common.add_argument("--sparsity", type=float, help="global sparsity S_g")
    common.add_argument("--contrast-cap", dest="contrast_cap", type=float, help="contrast cap M (> 1)")
    common.add_argument("--granularity", choices=("per_layer", "per_block"))
    metric = common.add_mutually_exclusive_group()
    metric.add_argument("--metric", help="builtin metric name")
    metric.add_argument("--metric-expr", dest="metric_expr", help="metric expression in the DSL")
    common.add_argument("--allocator", choices=("uniform", "sdsa", "global", "global_threshold"))
    common.add_argument("--pattern", help="unstructured, 2:4, 4:8, ...")
    common.add_argument("--group", choices=("row", "layer", "per_row", "per_layer"))
    common.add_argument("--fitness", choices=("recon", "ppl", "reconstruction", "perplexity"))
    common.add_argument("--n-samples", dest="n_samples", type=int, help="calibration windows")
    common.add_argument("--seq-len", dest="seq_len", type=int)
    common.add_argument("--max-windows", dest="max_windows", type=int, help="cap on evaluation windows")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--sparsities", dest="bench_sparsities", type=_floats, help="bench: comma-separated list")
    common.add_argument("--layers", dest="target_layers", type=lambda t: t.split(","), help="sensitivity targets")
    common.add_argument("--probes", dest="probe_ratios", type=_floats, help="sensitivity probe sparsities")
    common.add_argument("--background", dest="background_ratio", type=float, help="sensitivity background")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="autoprune", description="Skew-aware pruning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analyze": "per-layer magnitude skewness report",
        "allocate": "per-layer sparsity plan",
        "prune": "prune a bundle and write it with a report",
        "eval": "fitness of the configured pruning",
        "sensitivity": "per-layer sensitivity sweep",
        "search": "reasoning-graph metric search",
        "bench": "allocator x metric x sparsity comparison table",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, explicit = resolve_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        _write(cfg.out, "run_config.json", json.dumps(cfg.to_dict(), indent=2))
        HANDLERS[args.command](cfg, explicit)
    except ConfigError as exc:
        print(f"autoprune: config error: {exc}", file=sys.stderr)
        return 2
    except AutoPruneError as exc:
        print(f"autoprune: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"autoprune: I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

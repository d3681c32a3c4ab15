"""Reasoning-graph search over candidate importance metrics.

Each root-to-leaf path runs through the four stages. At every stage a parent
spawns ``k`` children, one per sampling temperature; leaves carry a metric
expression whose pruning fitness is measured, and the lowest fitness wins.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import (
    AutoPruneError,
    ConfigError,
    NoSuccessfulCandidates,
    SearchExhausted,
    UnparseableCandidate,
)
from ..metric import parse_metric, pretty_print
from ..model import fitness
from ..pruner import parse_pattern
from ..sdsa import SparsityAllocator
from .generators import DEFAULT_FIXTURE_CANDIDATES, FixtureGenerator, HttpChatGenerator
from .prompts import DSL_SUFFIX, STAGES, Stage, render_prompt, repair_prompt

logger = logging.getLogger(__name__)

DEFAULT_BRANCHING = {
    Stage.ANALYSIS: 1,
    Stage.HYPOTHESIS: 3,
    Stage.CONCEPTUAL_FORMULA: 3,
    Stage.COMPUTABLE_CONCEPT: 1,
}
DEFAULT_TEMPERATURES = (0.3, 0.7, 1.1)
SINGLE_TEMPERATURE = 0.7


def default_temperatures(k):
    if k == 1:
        return [SINGLE_TEMPERATURE]
    if k == len(DEFAULT_TEMPERATURES):
        return list(DEFAULT_TEMPERATURES)
    return [float(t) for t in np.linspace(DEFAULT_TEMPERATURES[0], DEFAULT_TEMPERATURES[-1], k)]


@dataclass
class SearchConfig:
    branch_factor: dict = field(default_factory=lambda: dict(DEFAULT_BRANCHING))
    temperatures: dict = field(default_factory=dict)
    sparsity: float = 0.5
    fitness_mode: str = "reconstruction"
    repair_budget: int = 2
    generator: str = "fixture"
    allocator: str = "sdsa"
    pattern: str = "unstructured"
    group: str = "per_row"
    llm_description: str = "TinyGPT decoder"
    generator_retries: int = 1
    workers: int = 4
    seq_len: int = 64
    max_windows: int | None = None
    seed: int = 0
    fixture_candidates: tuple = DEFAULT_FIXTURE_CANDIDATES
    endpoint: str | None = None
    model: str = "gpt-4o"
    api_key_env: str = "AUTOPRUNE_API_KEY"
    timeout: float = 60.0
    http_retries: int = 3
    max_in_flight: int = 4

    def __post_init__(self):
        self.branch_factor = {Stage(s): int(k) for s, k in {**DEFAULT_BRANCHING, **self.branch_factor}.items()}
        temps = {Stage(s): [float(t) for t in ts] for s, ts in self.temperatures.items()}
        for stage in STAGES:
            k = self.branch_factor[stage]
            if k < 1:
                raise ConfigError(f"search.branch_factor.{stage.value}: must be >= 1, got {k}")
            temps.setdefault(stage, default_temperatures(k))
            if len(temps[stage]) != k:
                raise ConfigError(
                    f"search.temperatures.{stage.value}: expected {k} values, got {len(temps[stage])}"
                )
        self.temperatures = temps
        if not 0.0 < self.sparsity < 1.0:
            raise ConfigError(f"search.sparsity: must lie in (0, 1), got {self.sparsity}")
        if self.repair_budget < 0:
            raise ConfigError("search.repair_budget: must be >= 0")
        if self.generator not in ("fixture", "llm_endpoint"):
            raise ConfigError(f"search.generator: unknown generator {self.generator!r}")
        if self.generator == "llm_endpoint" and not self.endpoint:
            raise ConfigError("search.endpoint: required for generator 'llm_endpoint'")
        self.fixture_candidates = tuple(self.fixture_candidates)

    def to_dict(self):
        d = dict(self.__dict__)
        d["branch_factor"] = {s.value: k for s, k in self.branch_factor.items()}
        d["temperatures"] = {s.value: list(t) for s, t in self.temperatures.items()}
        d["fixture_candidates"] = list(self.fixture_candidates)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"search: unknown fields {sorted(unknown)}")
        return cls(**d)


def make_generator(config):
    if config.generator == "fixture":
        return FixtureGenerator(config.fixture_candidates, seed=config.seed)
    return HttpChatGenerator(
        config.endpoint,
        config.model,
        api_key_env=config.api_key_env,
        timeout=config.timeout,
        retries=config.http_retries,
        max_in_flight=config.max_in_flight,
    )


@dataclass
class ReasoningNode:
    id: int
    stage: Stage
    content: str
    parent: int | None
    temperature: float
    error: str | None = None

    @property
    def failed(self):
        return self.error is not None

    def to_dict(self):
        return {
            "id": self.id,
            "stage": self.stage.value,
            "parent": self.parent,
            "temperature": self.temperature,
            "content": self.content,
            "error": self.error,
        }


@dataclass
class Candidate:
    leaf: int
    expression: str | None = None
    fitness: float | None = None
    failure: str | None = None

    @property
    def ok(self):
        return self.failure is None and self.fitness is not None

    def to_dict(self):
        return {"leaf": self.leaf, "expression": self.expression, "fitness": self.fitness, "failure": self.failure}


@dataclass
class ReasoningGraph:
    nodes: dict = field(default_factory=dict)
    candidates: list = field(default_factory=list)
    best: int | None = None

    def add_node(self, stage, content, parent, temperature, error=None):
        stage = Stage(stage)
        if parent is None:
            if stage is not Stage.ANALYSIS:
                raise ValueError("root nodes must be at the Analysis stage")
        elif self.nodes[parent].stage.successor is not stage:
            raise ValueError(f"{stage.value} cannot follow {self.nodes[parent].stage.value}")
        node = ReasoningNode(len(self.nodes), stage, content, parent, float(temperature), error)
        self.nodes[node.id] = node
        return node.id

    def chain(self, node_id):
        out = []
        cur = node_id
        while cur is not None:
            out.append(self.nodes[cur].content)
            cur = self.nodes[cur].parent
        return out[::-1]

    def children(self, node_id):
        return [n.id for n in self.nodes.values() if n.parent == node_id]

    def at_stage(self, stage):
        return [n.id for n in self.nodes.values() if n.stage is Stage(stage)]

    def leaves(self):
        return self.at_stage(Stage.COMPUTABLE_CONCEPT)

    def candidate(self, leaf):
        for c in self.candidates:
            if c.leaf == leaf:
                return c
        raise KeyError(leaf)

    def to_dict(self):
        return {
            "nodes": [n.to_dict() for n in self.nodes.values()],
            "candidates": [c.to_dict() for c in self.candidates],
            "best": self.best,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        g = cls()
        for n in d["nodes"]:
            g.nodes[n["id"]] = ReasoningNode(
                n["id"], Stage(n["stage"]), n["content"], n["parent"], n["temperature"], n.get("error")
            )
        g.candidates = [Candidate(**c) for c in d["candidates"]]
        g.best = d.get("best")
        return g

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _call(generator, stage, prompt, chain, temperature, retries):
    last = None
    for _ in range(retries + 1):
        try:
            return generator.generate(stage, prompt, chain, temperature), None
        except Exception as exc:  # noqa: BLE001 - any generator failure is recorded, not fatal
            last = exc
    return "", f"{type(last).__name__}: {last}"


def stage_prompt(stage, parent_content, config):
    stage = Stage(stage)
    source = config.llm_description if stage is Stage.ANALYSIS else parent_content
    prompt = render_prompt(stage, {stage.placeholder: source})
    if stage is Stage.COMPUTABLE_CONCEPT:
        prompt += DSL_SUFFIX
    return prompt


def expand_roots(graph, config, generator):
    prompt = stage_prompt(Stage.ANALYSIS, None, config)
    ids = []
    for t in config.temperatures[Stage.ANALYSIS]:
        content, err = _call(generator, Stage.ANALYSIS, prompt, [], t, config.generator_retries)
        ids.append(graph.add_node(Stage.ANALYSIS, content, None, t, err))
    return ids


def expand_node(graph, node_id, config, generator):
    """Create one child per temperature at the successor stage; returns child ids."""
    node = graph.nodes[node_id]
    stage = node.stage.successor
    if stage is None:
        raise ValueError(f"node {node_id} is already at the final stage")
    if node.failed:
        return []
    prompt = stage_prompt(stage, node.content, config)
    chain = graph.chain(node_id)
    ids = []
    for t in config.temperatures[stage]:
        content, err = _call(generator, stage, prompt, chain, t, config.generator_retries)
        if err:
            logger.warning("node %d expansion at T=%.2f failed: %s", node_id, t, err)
        ids.append(graph.add_node(stage, content, node_id, t, err))
    return ids


def build_graph(config, generator):
    graph = ReasoningGraph()
    frontier = expand_roots(graph, config, generator)
    while frontier and graph.nodes[frontier[0]].stage.successor is not None:
        nxt = []
        for nid in frontier:
            nxt.extend(expand_node(graph, nid, config, generator))
        frontier = nxt
    return graph


_FENCE = re.compile(r"```[^\n`]*\n?(.*?)```", re.S)


def _expression_candidates(text):
    seen = []
    blocks = _FENCE.findall(text)
    lines = [ln for b in blocks for ln in b.splitlines()]
    lines += _FENCE.sub("\n", text).splitlines()
    for ln in lines:
        ln = ln.strip().strip("`").strip()
        if not ln:
            continue
        for piece in (ln, ln.rsplit("=", 1)[-1].strip()):
            if piece and piece not in seen:
                seen.append(piece)
    return seen


def extract_metric(text):
    """First fenced or line-isolated expression in ``text`` that parses."""
    err = None
    for piece in _expression_candidates(text):
        try:
            return parse_metric(piece)
        except AutoPruneError as exc:
            err = err or exc
    raise UnparseableCandidate(f"no parsable expression found ({err})" if err else "no expression found")


def parse_candidate(content, repair_budget=0, generator=None, context=None):
    """Parse a leaf's text, asking ``generator`` for up to ``repair_budget`` corrections."""
    context = context or {}
    text = content
    prompt = context.get("prompt", "")
    for attempt in range(repair_budget + 1):
        try:
            return extract_metric(text)
        except UnparseableCandidate as exc:
            if attempt == repair_budget or generator is None:
                raise UnparseableCandidate(f"after {attempt} repairs: {exc}") from None
            prompt = repair_prompt(prompt, text, exc)
            try:
                text = generator.generate(
                    Stage.COMPUTABLE_CONCEPT, prompt, context.get("chain", []), context.get("temperature", 0.0)
                )
            except Exception as gen_exc:  # noqa: BLE001
                raise UnparseableCandidate(f"repair request failed: {gen_exc}") from gen_exc
    raise AssertionError("unreachable")


def select_best(graph):
    """Leaf id of the lowest-fitness successful candidate; ties go to the lower id."""
    ok = [c for c in graph.candidates if c.ok]
    if not ok:
        raise NoSuccessfulCandidates("no candidate produced a fitness value")
    return min(ok, key=lambda c: (c.fitness, c.leaf)).leaf


def run_search(bundle, stats, eval_corpus, config=None, generator=None, out_path=None):
    config = config or SearchConfig()
    generator = generator or make_generator(config)
    graph = build_graph(config, generator)

    plan = SparsityAllocator(sparsity=config.sparsity, method=config.allocator).fit(bundle).plan_
    pattern = parse_pattern(config.pattern, config.group)

    parsed = []
    for leaf in graph.leaves():
        node = graph.nodes[leaf]
        cand = Candidate(leaf)
        if node.failed:
            cand.failure = f"generation failed: {node.error}"
        else:
            context = {
                "prompt": stage_prompt(Stage.COMPUTABLE_CONCEPT, graph.nodes[node.parent].content, config),
                "chain": graph.chain(node.parent),
                "temperature": node.temperature,
            }
            try:
                expr = parse_candidate(node.content, config.repair_budget, generator, context)
                cand.expression = pretty_print(expr)
                parsed.append((cand, expr))
            except UnparseableCandidate as exc:
                cand.failure = f"UnparseableCandidate: {exc}"
        graph.candidates.append(cand)

    def evaluate(expr):
        return fitness(
            bundle, plan, expr, stats, config.fitness_mode, pattern, eval_corpus, config.seq_len, config.max_windows
        ).value

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        futures = [(cand, pool.submit(evaluate, expr)) for cand, expr in parsed]
        for cand, fut in futures:
            try:
                cand.fitness = float(fut.result())
            except Exception as exc:  # noqa: BLE001 - a bad candidate never aborts its siblings
                cand.failure = f"{type(exc).__name__}: {exc}"

    try:
        graph.best = select_best(graph)
    except NoSuccessfulCandidates:
        if out_path:
            graph.save(out_path)
        raise SearchExhausted("every candidate failed", graph) from None
    if out_path:
        graph.save(out_path)
    return graph


__all__ = [
    "Candidate",
    "ReasoningGraph",
    "ReasoningNode",
    "SearchConfig",
    "build_graph",
    "expand_node",
    "expand_roots",
    "extract_metric",
    "make_generator",
    "parse_candidate",
    "run_search",
    "select_best",
    "stage_prompt",
]

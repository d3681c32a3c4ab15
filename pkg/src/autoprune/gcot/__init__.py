from .generators import CandidateGenerator, FixtureGenerator, HttpChatGenerator
from .prompts import DSL_SUFFIX, Stage, render_prompt, template
from .search import (
    Candidate,
    ReasoningGraph,
    ReasoningNode,
    SearchConfig,
    build_graph,
    expand_node,
    extract_metric,
    parse_candidate,
    run_search,
    select_best,
)

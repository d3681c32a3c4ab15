"""Stage prompts for the reasoning graph."""

import enum
from functools import lru_cache
from importlib import resources

from ..errors import MissingPlaceholder
from ..metric import BUILTIN_TEXT


class Stage(str, enum.Enum):
    ANALYSIS = "Analysis"
    HYPOTHESIS = "Hypothesis"
    CONCEPTUAL_FORMULA = "ConceptualFormula"
    COMPUTABLE_CONCEPT = "ComputableConcept"

    @property
    def successor(self):
        order = list(Stage)
        i = order.index(self)
        return order[i + 1] if i + 1 < len(order) else None

    @property
    def placeholder(self):
        return PLACEHOLDERS[self]


STAGES = tuple(Stage)

PLACEHOLDERS = {
    Stage.ANALYSIS: "llm_description",
    Stage.HYPOTHESIS: "analysis_text",
    Stage.CONCEPTUAL_FORMULA: "hypothesis_text",
    Stage.COMPUTABLE_CONCEPT: "conceptual_formula",
}

_FILES = {
    Stage.ANALYSIS: "stage1_analysis.txt",
    Stage.HYPOTHESIS: "stage2_hypothesis.txt",
    Stage.CONCEPTUAL_FORMULA: "stage3_conceptual_formula.txt",
    Stage.COMPUTABLE_CONCEPT: "stage4_computable_concept.txt",
}

# Appended to the last stage only; the stock template asks for prose, the
# search needs one expression it can parse.
DSL_SUFFIX = """

OUTPUT FORMAT:

After the list, express the complete importance score as a single expression in the following grammar and put it alone in a fenced code block (```) as the last thing in your answer.

    expr     := term (('+'|'-') term)*
    term     := factor (('*'|'/') factor)*
    factor   := func '(' expr ')' | terminal | number | '(' expr ')'
    func     := 'abs' | 'sqrt' | 'sq' | 'log1p'
    terminal := 'W' | 'rowl1(W)' | 'rowl2(W)' | 'coll1(X)' | 'coll2(X)' | 'coll2sq(X)' | 'hessdiag(X)'

W is the weight matrix (rows are output neurons). rowl1(W)/rowl2(W) are the L1/L2 norms of each weight row. coll1(X), coll2(X), coll2sq(X) are the L1 norm, L2 norm and squared L2 norm of each input-feature column of the calibration activations X. hessdiag(X) is the diagonal of (X^T X + lambda I)^-1. Higher scores mean more important weights. Example: """ + "`" + BUILTIN_TEXT["wanda"] + "`"


@lru_cache(maxsize=None)
def template(stage):
    stage = Stage(stage)
    return resources.files(__package__).joinpath("templates", _FILES[stage]).read_text(encoding="utf-8")


def render_prompt(stage, context):
    """Fill the stage template's single placeholder from ``context``."""
    stage = Stage(stage)
    key = PLACEHOLDERS[stage]
    if key not in context:
        raise MissingPlaceholder(f"{stage.value} prompt needs {{{key}}}")
    return template(stage).replace("{" + key + "}", str(context[key]))


def repair_prompt(previous_prompt, bad_output, error):
    return (
        f"{previous_prompt}\n\nYOUR PREVIOUS ANSWER:\n\n{bad_output}\n\n"
        f"It could not be parsed: {error}\n"
        "Answer again and end with exactly one fenced expression in the grammar above."
    )

"""Prompt construction for the annotation chat loop.

Builds the prior-knowledge prediction prompt, the summary
self-verification prompt, and the instruction-tuning question drawn
from a fixed bank of rewrite templates.  All builders are pure:
identical inputs produce byte-identical prompts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np

from .affect import (
    EXPRESSION_CATEGORIES,
    EXPRESSION_LEXICON,
    TASK_ORDER,
    AuVocabulary,
    EmotionRecord,
    PartialAnnotation,
    TaskKind,
)

if TYPE_CHECKING:  # pragma: no cover
    from .uamc import SampleSet, TaskUncertainty


class EmptyTargets(ValueError):
    """A prediction prompt was requested with no missing tasks."""


class EmptySampleSet(ValueError):
    """A summary prompt was requested with no sampled rounds."""


@dataclass(frozen=True)
class PromptText:
    """One ready-to-send prompt."""

    system: str
    user: str
    image_attached: bool
    response_schema_id: str


# --- response schema registry -------------------------------------------------
#
# Schema ids name the exact JSON keys a response must carry, so the client
# can validate replies without re-deriving the request.

_TASK_KEYS = {
    TaskKind.EXPRESSION: ("expression",),
    TaskKind.VALENCE_AROUSAL: ("valence", "arousal"),
    TaskKind.ACTION_UNITS: ("aus",),
}

SUMMARY_SCHEMA_ID = "summary:full"


def schema_id_for(targets: Iterable[TaskKind]) -> str:
    tasks = [t for t in TASK_ORDER if t in set(targets)]
    if not tasks:
        raise EmptyTargets("no target tasks")
    return "predict:" + "+".join(t.value for t in tasks)


def schema_tasks(schema_id: str) -> tuple[frozenset[TaskKind], bool]:
    """Return (tasks whose keys the response must carry, analysis required)."""
    if schema_id == SUMMARY_SCHEMA_ID:
        return frozenset(TASK_ORDER), True
    if schema_id.startswith("predict:"):
        names = schema_id[len("predict:"):].split("+")
        tasks = frozenset(TaskKind(n) for n in names)
        if tasks:
            return tasks, False
    raise ValueError(f"unknown response schema id: {schema_id!r}")


def response_keys(tasks: Iterable[TaskKind], *, analysis: bool = False) -> tuple[str, ...]:
    keys = [k for t in TASK_ORDER if t in set(tasks) for k in _TASK_KEYS[t]]
    if analysis:
        keys.append("analysis")
    return tuple(keys)


# --- shared prompt fragments --------------------------------------------------

_SYSTEM = (
    "You are an expert facial-behavior analyst. You study a face image together "
    "with any verified annotations supplied to you, and you answer with carefully "
    "calibrated, machine-readable emotion annotations."
)

_CORRELATIONS = (
    "Background correlations between the description levels:\n"
    "- A happy expression typically comes with cheek raising (AU6) and lip-corner "
    "pulling (AU12), and AU12 rarely co-occurs with negative valence.\n"
    "- The strength of the facial muscle activations is reflected in the arousal "
    "value: more intense activations mean higher arousal.\n"
    "- Different units signal high arousal in different emotions, for example "
    "upper-lid raising (AU5) in fear versus parted lips (AU25) in surprise."
)

_FORMAT_RULES = {
    "expression": '- "expression" must be one of: ' + ", ".join(EXPRESSION_CATEGORIES) + ".",
    "valence": '- "valence" must be a number in [-1, 1].',
    "arousal": '- "arousal" must be a number in [-1, 1].',
    "analysis": '- "analysis" must be a nonempty string.',
}

_TASK_PHRASES = {
    TaskKind.EXPRESSION: "the discrete expression category",
    TaskKind.VALENCE_AROUSAL: "the valence and arousal values",
    TaskKind.ACTION_UNITS: "the activated action units",
}

#: Alternative lead-ins for the request sentence, cycled per round when
#: paraphrased rounds are enabled.
_REQUEST_VARIANTS = (
    "Predict {what} for this face.",
    "Infer {what} for this face.",
    "Estimate {what} for this face.",
)

FORMAT_REMINDER = (
    "\n\nReminder: your previous reply could not be parsed. Respond with exactly "
    "one fenced JSON block containing only the requested keys and nothing else."
)


def _fmt(x: float) -> str:
    return repr(float(x))


def _known_lines(ann: PartialAnnotation) -> list[str]:
    lines = []
    if ann.expression is not None:
        lines.append(f"- expression: {ann.expression[0].value}")
    if ann.va is not None:
        va = ann.va[0]
        lines.append(f"- valence {_fmt(va.valence)}, arousal {_fmt(va.arousal)}")
    if ann.aus is not None:
        active = ann.aus[0].active()
        shown = ", ".join(f"AU{a}" for a in active) if active else "none"
        lines.append(f"- activated action units: {shown}")
    return lines


def _au_rule(vocab: AuVocabulary) -> str:
    ids = ", ".join(str(a) for a in vocab)
    return (
        '- "aus" must be an object mapping every action unit id in '
        f"{{{ids}}} to true or false."
    )


def _format_block(keys: Sequence[str], vocab: AuVocabulary) -> str:
    quoted = ", ".join(f'"{k}"' for k in keys)
    lines = [
        "Respond with a single fenced JSON block (```json ... ```) containing "
        f"exactly these keys: {quoted}."
    ]
    for key in keys:
        lines.append(_au_rule(vocab) if key == "aus" else _FORMAT_RULES[key])
    return "\n".join(lines)


def build_prior_prompt(
    record: EmotionRecord,
    targets: Iterable[TaskKind],
    vocab: AuVocabulary,
    *,
    variant: int = 0,
) -> PromptText:
    """Prediction prompt: verbalized known labels, correlation hints, and a
    request for exactly the missing tasks.

    Raises :class:`EmptyTargets` when ``targets`` is empty.
    """
    target_set = frozenset(targets)
    if not target_set:
        raise EmptyTargets(f"record {record.record_id}: no target tasks")
    ordered = [t for t in TASK_ORDER if t in target_set]

    known = _known_lines(record.annotation)
    known_block = (
        "Verified annotations for this face:\n" + "\n".join(known)
        if known
        else "No verified annotations are available for this face."
    )
    what = " and ".join(_TASK_PHRASES[t] for t in ordered)
    request = _REQUEST_VARIANTS[variant % len(_REQUEST_VARIANTS)].format(what=what)
    keys = response_keys(ordered)
    user = "\n\n".join(
        [
            "You are given a face image with partially verified emotion annotations.",
            known_block,
            _CORRELATIONS,
            "Use the verified annotations, the image and the correlations above to "
            "infer what is missing. " + request,
            _format_block(keys, vocab),
        ]
    )
    return PromptText(
        system=_SYSTEM,
        user=user,
        image_attached=True,
        response_schema_id=schema_id_for(ordered),
    )


def _round_line(index: int, ann: PartialAnnotation) -> str:
    parts = []
    if ann.expression is not None:
        parts.append(f"expression={ann.expression[0].value}")
    if ann.va is not None:
        va = ann.va[0]
        parts.append(f"valence={_fmt(va.valence)}, arousal={_fmt(va.arousal)}")
    if ann.aus is not None:
        active = ann.aus[0].active()
        parts.append("active AUs: " + (", ".join(f"AU{a}" for a in active) if active else "none"))
    return f"- round {index}: " + "; ".join(parts)


_TASK_NOUN = {
    TaskKind.EXPRESSION: "expression",
    TaskKind.VALENCE_AROUSAL: "valence-arousal",
    TaskKind.ACTION_UNITS: "action units",
}


def _reliability_line(stat: "TaskUncertainty") -> str:
    noun = _TASK_NOUN[stat.task]
    if stat.normalized < 0.5:
        verdict = "high confidence, the rounds agree; treat these values as reliable"
    else:
        verdict = (
            "low confidence, verify carefully against the image; "
            "treat these values as unreliable"
        )
    return f"- {noun}: normalized uncertainty {stat.normalized:.2f} ({verdict})"


def build_summary_prompt(
    record: EmotionRecord,
    samples: "SampleSet",
    stats: Sequence["TaskUncertainty"],
    vocab: AuVocabulary,
) -> PromptText:
    """Self-verification prompt over the sampled rounds.

    Restates the prior knowledge, lists every round's predicted values and
    the per-task uncertainty verdicts, and asks for the final annotation for
    all three tasks plus a comprehensive analysis.

    Raises :class:`EmptySampleSet` when no rounds were collected.
    """
    if not samples.rounds:
        raise EmptySampleSet(f"record {samples.record_id}: no sampled rounds")

    known = _known_lines(record.annotation)
    known_block = (
        "Verified annotations for this face:\n" + "\n".join(known)
        if known
        else "No verified annotations are available for this face."
    )
    rounds_block = "Your earlier prediction rounds for the missing descriptions:\n" + "\n".join(
        _round_line(i, ann) for i, ann in enumerate(samples.rounds, start=1)
    )
    stats_block = "Agreement across rounds:\n" + "\n".join(_reliability_line(s) for s in stats)
    keys = response_keys(TASK_ORDER, analysis=True)
    user = "\n\n".join(
        [
            "You annotated this face over several sampling rounds; now verify and "
            "consolidate your answer.",
            known_block,
            rounds_block,
            stats_block,
            _CORRELATIONS,
            "Re-examine the image and produce the final annotation for all three "
            "descriptions (expression, valence-arousal, action units), keeping any "
            "verified annotations unchanged, plus a comprehensive analysis of how "
            "the three levels cohere for this face.",
            _format_block(keys, vocab),
        ]
    )
    return PromptText(
        system=_SYSTEM,
        user=user,
        image_attached=True,
        response_schema_id=SUMMARY_SCHEMA_ID,
    )


def build_analysis_prompt(record: EmotionRecord, vocab: AuVocabulary) -> PromptText:
    """Summary-schema prompt for records whose annotation is already complete.

    No sampling happened, so there are no rounds to restate; the annotator is
    asked to confirm the verified labels and supply the analysis text.
    """
    known = _known_lines(record.annotation)
    known_block = "Verified annotations for this face:\n" + "\n".join(known)
    keys = response_keys(TASK_ORDER, analysis=True)
    user = "\n\n".join(
        [
            "This face already carries verified annotations for all three "
            "descriptions.",
            known_block,
            _CORRELATIONS,
            "Restate the three descriptions exactly as verified and add a "
            "comprehensive analysis of how they cohere for this face.",
            _format_block(keys, vocab),
        ]
    )
    return PromptText(
        system=_SYSTEM,
        user=user,
        image_attached=True,
        response_schema_id=SUMMARY_SCHEMA_ID,
    )


# --- rewrite templates --------------------------------------------------------

_AU_TOKEN = re.compile(r"\bAU\s?\d+\b", re.IGNORECASE)
_DECIMAL = re.compile(r"[-+]?\d+(?:\.\d+)?")
_WORD = re.compile(r"[a-z]+")


def find_label_tokens(text: str) -> list[str]:
    """Label-ish tokens in ``text``: category words and synonyms, AU ids,
    or numeric literals.  Empty means the text is safe as a question."""
    found = [w for w in _WORD.findall(text.lower()) if w in EXPRESSION_LEXICON]
    found.extend(m.group(0) for m in _AU_TOKEN.finditer(text))
    found.extend(m.group(0) for m in _DECIMAL.finditer(text))
    return found


@dataclass(frozen=True)
class RewriteTemplateSet:
    """Exactly eleven question templates, none of which leaks a label."""

    templates: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.templates) != 11:
            raise ValueError(f"expected 11 rewrite templates, got {len(self.templates)}")
        for i, text in enumerate(self.templates):
            if not text.strip():
                raise ValueError(f"template {i} is empty")
            leaks = find_label_tokens(text)
            if leaks:
                raise ValueError(f"template {i} leaks label tokens: {leaks}")


def load_rewrite_templates(path: Optional[str] = None) -> RewriteTemplateSet:
    """Load the template bank from ``path`` or the packaged default."""
    if path is None:
        payload = resources.files("seke.data").joinpath("rewrite_templates.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            payload = fh.read()
    data = json.loads(payload)
    if not isinstance(data, list) or not all(isinstance(t, str) for t in data):
        raise ValueError("rewrite template file must hold a JSON array of strings")
    return RewriteTemplateSet(tuple(data))


def pick_rewrite_question(rng: np.random.Generator, templates: RewriteTemplateSet) -> str:
    """Uniform draw over the template bank; deterministic given ``rng`` state."""
    return templates.templates[int(rng.integers(len(templates.templates)))]

"""Uncertainty-aware Monte Carlo sampling over the annotator.

Collects two completions per record, then keeps sampling while an
acceptance draw against the normalized epistemic uncertainty says the
answers still disagree too much, up to the round budget ``N``.  The
final sample set feeds the summary self-verification step.

Uncertainty of a task is the population variance of its per-round
encodings, ``U = (1/S) * sum(f^2) - ((1/S) * sum(f))^2``:

- expression: one-hot encoded; the per-category variances sum to the
  Gini impurity ``1 - sum(p_c^2)``, maximal at ``1 - 1/C``;
- action units: per-unit Bernoulli variance ``p * (1 - p)`` (maximal at
  0.25), aggregated across the vocabulary by mean or max;
- valence-arousal: per-dimension variance, combined by max, maximal at
  1.0 on the [-1, 1] range.

Each raw value is divided by its analytic maximum so tasks compare on a
common [0, 1] scale, and the largest normalized value drives the
acceptance probability ``p_acc = 1/2 + 1/2 * u_max``.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .affect import (
    CATEGORY_COUNT,
    TASK_ORDER,
    AuVocabulary,
    EmotionRecord,
    ExpressionLabel,
    Origin,
    PartialAnnotation,
    Provenance,
    TaskKind,
    missing_tasks,
)
from .annotator import AnnotatorResponse, DecodingParams, ParseError, parse_structured
from .prompts import FORMAT_REMINDER, PromptText


class DomainError(ValueError):
    """An argument left its documented domain."""


class InsufficientSamples(ValueError):
    """Variance needs at least two rounds."""


class AnnotatorExhausted(Exception):
    """An initial round failed every parse re-ask; the record is unusable."""

    def __init__(self, record_id: str, round_index: int):
        super().__init__(f"record {record_id}: round {round_index} failed all re-asks")
        self.record_id = record_id
        self.round_index = round_index


class SummaryParseError(Exception):
    """The summary reply never satisfied the full response schema."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class StopReason(enum.Enum):
    LOW_UNCERTAINTY_DRAW = "low_uncertainty_draw"
    BUDGET = "budget_N"
    NO_MISSING_TASKS = "no_missing_tasks"


@dataclass(frozen=True)
class SampleSet:
    """Successful rounds for one record; each round covers the target tasks."""

    record_id: str
    rounds: tuple[PartialAnnotation, ...]
    failed_rounds: int = 0


@dataclass(frozen=True)
class TaskUncertainty:
    task: TaskKind
    raw: float
    normalized: float
    round: int


@dataclass(frozen=True)
class UamcResult:
    samples: SampleSet
    trajectory: tuple[TaskUncertainty, ...]
    final_s: int
    stop_reason: StopReason
    seed: int


def derive_record_seed(master_seed: int, record_id: str) -> int:
    """Stable per-record substream seed; independent of worker scheduling."""
    digest = hashlib.sha256(f"{master_seed}:{record_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# --- uncertainty estimation -----------------------------------------------------


def population_variance(values: Sequence[float]) -> float:
    """Population variance ``(1/S) * sum((x - mean)^2)`` over at least two
    values.

    The mean-of-squared-deviations form is used instead of the algebraically
    equal ``E[x^2] - E[x]^2`` because the latter cancels catastrophically
    when the spread is tiny relative to the magnitude.
    """
    n = len(values)
    if n < 2:
        raise InsufficientSamples(f"need at least 2 values, got {n}")
    floats = [float(x) for x in values]
    mean = sum(floats) / n
    return sum((x - mean) ** 2 for x in floats) / n


def task_variance(samples: SampleSet, task: TaskKind, *, au_aggregate: str = "mean") -> float:
    """Raw epistemic uncertainty of ``task`` across the sampled rounds."""
    if au_aggregate not in ("mean", "max"):
        raise DomainError(f"unknown au_aggregate: {au_aggregate!r}")
    values = [r.value(task) for r in samples.rounds if r.get(task) is not None]
    if len(values) < 2:
        raise InsufficientSamples(
            f"task {task.value}: need at least 2 rounds, got {len(values)}"
        )
    n = len(values)
    if task is TaskKind.EXPRESSION:
        # One-hot encoding: per-category variance is p - p^2; summing over
        # categories gives the Gini impurity.
        total = 0.0
        for cat in ExpressionLabel:
            p = sum(1 for v in values if v is cat) / n
            total += p - p * p
        return max(0.0, total)
    if task is TaskKind.VALENCE_AROUSAL:
        var_v = population_variance([v.valence for v in values])
        var_a = population_variance([v.arousal for v in values])
        return max(var_v, var_a)
    per_au = [
        population_variance([1.0 if v.occurrences.get(au, False) else 0.0 for v in values])
        for au in sorted(values[0].occurrences)
    ]
    return max(per_au) if au_aggregate == "max" else sum(per_au) / len(per_au)


def normalize_uncertainty(
    raw: float,
    task: TaskKind,
    vocab: Optional[AuVocabulary] = None,
    *,
    category_count: int = CATEGORY_COUNT,
) -> float:
    """Divide by the analytic maximum of the task's encoding and clip to [0, 1]."""
    if task is TaskKind.EXPRESSION:
        peak = 1.0 - 1.0 / category_count
    elif task is TaskKind.ACTION_UNITS:
        peak = 0.25
    else:
        peak = 1.0
    return min(1.0, max(0.0, raw / peak))


def acceptance_probability(u_max: float) -> float:
    """``1/2 + 1/2 * u_max``: 0.5 floor at full agreement, 1.0 at maximal
    disagreement."""
    if not 0.0 <= u_max <= 1.0:
        raise DomainError(f"u_max out of [0, 1]: {u_max}")
    return 0.5 + 0.5 * u_max


def task_uncertainties(
    samples: SampleSet,
    targets: Iterable[TaskKind],
    vocab: AuVocabulary,
    *,
    round_index: int,
    au_aggregate: str = "mean",
) -> list[TaskUncertainty]:
    """Raw and normalized uncertainty for every target task, in task order."""
    out = []
    for task in TASK_ORDER:
        if task not in set(targets):
            continue
        raw = task_variance(samples, task, au_aggregate=au_aggregate)
        out.append(
            TaskUncertainty(
                task=task,
                raw=raw,
                normalized=normalize_uncertainty(raw, task, vocab),
                round=round_index,
            )
        )
    return out


def select_max(stats: Sequence[TaskUncertainty]) -> TaskUncertainty:
    """The entry with the largest normalized uncertainty; ties keep the
    earliest task in task order.  Scaling every value by a common positive
    factor does not change the selection."""
    if not stats:
        raise DomainError("no task uncertainties to select from")
    return max(stats, key=lambda s: s.normalized)


# --- sampling loop ---------------------------------------------------------------

PromptSource = Union[PromptText, Callable[[int], PromptText]]


def _prompt_for(source: PromptSource, round_index: int) -> PromptText:
    return source(round_index) if callable(source) else source


def _sample_round(
    annotator,
    prompt: PromptText,
    image_ref: str,
    params: DecodingParams,
    rng: np.random.Generator,
    parse_retries: int,
) -> Optional[PartialAnnotation]:
    """One round: ask once, then re-ask with a format reminder after each
    parse failure.  Returns None when every ask failed to parse."""
    for ask in range(parse_retries + 1):
        asked = prompt if ask == 0 else replace(prompt, user=prompt.user + FORMAT_REMINDER)
        response = annotator.complete(asked, image_ref, params, rng=rng)
        if response.parsed is not None:
            return response.parsed
    return None


def run_uamc(
    record: EmotionRecord,
    annotator,
    prompt: PromptSource,
    vocab: AuVocabulary,
    *,
    seed: int,
    max_samples: int = 5,
    au_aggregate: str = "mean",
    mc_temperature: float = 1.0,
    max_output_tokens: int = 768,
    parse_retries: int = 3,
) -> UamcResult:
    """Adaptive sampling for one record's missing tasks.

    Two rounds are always collected; afterwards the loop keeps sampling
    while a uniform draw lands below the acceptance probability of the
    current maximal task uncertainty, up to ``max_samples`` rounds.  The
    uncertainty trajectory is re-evaluated after every successful round
    from the second onward, so its length is ``final_s - 1``.  Rounds
    whose parse re-asks all fail count against the budget but add no
    sample; a failed initial round raises :class:`AnnotatorExhausted`.
    """
    if max_samples < 2:
        raise DomainError(f"max_samples must be at least 2, got {max_samples}")
    targets = missing_tasks(record)
    if not targets:
        return UamcResult(
            samples=SampleSet(record.record_id, rounds=()),
            trajectory=(),
            final_s=0,
            stop_reason=StopReason.NO_MISSING_TASKS,
            seed=seed,
        )

    rng = np.random.default_rng(seed)
    rounds: list[PartialAnnotation] = []
    failed = 0

    def ask(round_index: int) -> Optional[PartialAnnotation]:
        params = DecodingParams(
            temperature=mc_temperature,
            max_output_tokens=max_output_tokens,
            round_index=round_index,
        )
        return _sample_round(
            annotator, _prompt_for(prompt, round_index), record.image_ref,
            params, rng, parse_retries,
        )

    for round_index in (1, 2):
        parsed = ask(round_index)
        if parsed is None:
            raise AnnotatorExhausted(record.record_id, round_index)
        rounds.append(parsed)
    attempts = 2

    def evaluate() -> TaskUncertainty:
        stats = task_uncertainties(
            SampleSet(record.record_id, tuple(rounds), failed),
            targets,
            vocab,
            round_index=len(rounds),
            au_aggregate=au_aggregate,
        )
        return select_max(stats)

    trajectory = [evaluate()]
    while True:
        if attempts >= max_samples:
            stop = StopReason.BUDGET
            break
        p_acc = acceptance_probability(trajectory[-1].normalized)
        if rng.random() >= p_acc:
            stop = StopReason.LOW_UNCERTAINTY_DRAW
            break
        attempts += 1
        parsed = ask(attempts)
        if parsed is None:
            # The round is spent but contributes no sample; the last
            # uncertainty estimate keeps driving the next decision.
            failed += 1
            continue
        rounds.append(parsed)
        trajectory.append(evaluate())

    return UamcResult(
        samples=SampleSet(record.record_id, tuple(rounds), failed),
        trajectory=tuple(trajectory),
        final_s=len(rounds),
        stop_reason=stop,
        seed=seed,
    )


# --- label finalization -----------------------------------------------------------


def finalize_labels(
    record: EmotionRecord,
    summary_response: AnnotatorResponse,
    vocab: AuVocabulary,
    *,
    run_id: str,
) -> PartialAnnotation:
    """Merge the summary reply with the record's manual labels.

    Manual labels always win; only tasks absent from the record are filled
    from the summary, stamped with generated provenance carrying ``run_id``.
    Raises :class:`SummaryParseError` when the reply does not satisfy the
    full summary schema (all three tasks plus a nonempty analysis).
    """
    parsed = summary_response.parsed
    if parsed is None or not summary_response.analysis_text or not parsed.is_complete():
        try:
            parse_structured(
                summary_response.raw_text, TASK_ORDER, vocab, require_analysis=True
            )
        except ParseError as exc:
            raise SummaryParseError(exc.code, str(exc)) from None
        raise SummaryParseError("bad_schema", "summary reply is incomplete")

    prov = Provenance(Origin.GENERATED, generator_run_id=run_id)
    fields = {}
    for task, name in ((TaskKind.EXPRESSION, "expression"),
                       (TaskKind.VALENCE_AROUSAL, "va"),
                       (TaskKind.ACTION_UNITS, "aus")):
        manual = record.annotation.get(task)
        if manual is not None:
            fields[name] = manual
        else:
            fields[name] = (parsed.value(task), prov)
    return PartialAnnotation(**fields)

"""Shared builders for the test suite."""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from seke.affect import (
    TASK_ORDER,
    AuAnnotation,
    AuVocabulary,
    EmotionRecord,
    ExpressionLabel,
    Origin,
    PartialAnnotation,
    Provenance,
    TaskKind,
    VaAnnotation,
)
from seke.dataset import FeidRecord, GeneratorInfo, UncertaintySummary

MANUAL = Provenance(Origin.MANUAL, source_dataset="demo")
GENERATED = Provenance(Origin.GENERATED)

CATEGORIES = tuple(ExpressionLabel)


def complete_annotation(
    expression: ExpressionLabel = ExpressionLabel.HAPPINESS,
    valence: float = 0.7,
    arousal: float = 0.4,
    active: Iterable[int] = (6, 12),
    vocab: Optional[AuVocabulary] = None,
    prov: Provenance = MANUAL,
) -> PartialAnnotation:
    vocab = vocab if vocab is not None else AuVocabulary.default()
    return PartialAnnotation(
        expression=(expression, prov),
        va=(VaAnnotation(float(valence), float(arousal)), prov),
        aus=(AuAnnotation.dense(vocab, active), prov),
    )


def random_truth(
    rng: np.random.Generator,
    vocab: Optional[AuVocabulary] = None,
    prov: Provenance = MANUAL,
) -> PartialAnnotation:
    vocab = vocab if vocab is not None else AuVocabulary.default()
    label = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    va = VaAnnotation(float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-1.0, 1.0)))
    occ = {a: bool(rng.random() < 0.4) for a in vocab}
    return PartialAnnotation(
        expression=(label, prov), va=(va, prov), aus=(AuAnnotation(occ), prov)
    )


def restrict(ann: PartialAnnotation, tasks: Iterable[TaskKind]) -> PartialAnnotation:
    """Keep only ``tasks``; the rest become absent."""
    keep = frozenset(tasks)
    return PartialAnnotation(
        expression=ann.expression if TaskKind.EXPRESSION in keep else None,
        va=ann.va if TaskKind.VALENCE_AROUSAL in keep else None,
        aus=ann.aus if TaskKind.ACTION_UNITS in keep else None,
    )


def make_record(
    record_id: str = "r1",
    annotation: Optional[PartialAnnotation] = None,
    subject_id: Optional[str] = None,
    image_ref: str = "img.jpg",
) -> EmotionRecord:
    if annotation is None:
        annotation = complete_annotation()
    return EmotionRecord(
        record_id=record_id,
        image_ref=image_ref,
        annotation=annotation,
        subject_id=subject_id,
    )


def random_feid(rng: np.random.Generator, index: int) -> FeidRecord:
    """A randomized but schema-valid instruction record."""
    vocab = AuVocabulary.default()
    manual_mask = [bool(rng.integers(2)) for _ in TASK_ORDER]
    gen = Provenance(Origin.GENERATED, generator_run_id=f"run-{index % 3}")
    provs = [MANUAL if m else gen for m in manual_mask]
    label = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    labels = PartialAnnotation(
        expression=(label, provs[0]),
        va=(
            VaAnnotation(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
            provs[1],
        ),
        aus=(
            AuAnnotation({a: bool(rng.random() < 0.4) for a in vocab}),
            provs[2],
        ),
    )
    final_s = int(rng.integers(0, 6))
    per_task = {}
    if final_s >= 2:
        for task in TASK_ORDER:
            if rng.random() < 0.7:
                per_task[task.value] = float(rng.uniform(0.0, 1.0))
    return FeidRecord(
        record_id=f"rec-{index}",
        image_ref=f"images/{index}.jpg",
        question="Describe what this face conveys and how the cues fit together.",
        answer=f"The face reads as {label.value}; the cues cohere (case {index}).",
        labels=labels,
        uncertainty=UncertaintySummary(final_s=final_s, per_task=per_task),
        generator=GeneratorInfo(model="synthetic", seed=42, timestamp="1970-01-01T00:00:00Z"),
    )


def oracle_scalar_variance(values) -> float:
    """Independent oracle: raw second moment minus squared first moment."""
    xs = [float(v) for v in values]
    n = len(xs)
    m2 = sum(x * x for x in xs) / n
    m1 = sum(xs) / n
    return m2 - m1 * m1


def oracle_gini(votes) -> float:
    """Independent oracle for the one-hot encoding: 1 - sum of squared shares."""
    n = len(votes)
    shares = [votes.count(c) / n for c in set(votes)]
    return 1.0 - sum(p * p for p in shares)

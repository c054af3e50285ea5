"""Instruction-record assembly, JSONL serialization and subject splits.

The on-disk record schema is fixed; serialization is canonical (stable
key order, compact separators), so equal records yield byte-identical
lines.  Timestamps are RFC 3339 UTC strings and are ignored by
:func:`records_equal`.
"""

from __future__ import annotations

import datetime as _dt
import fcntl
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .affect import (
    TASK_ORDER,
    AuAnnotation,
    EmotionRecord,
    ExpressionLabel,
    Origin,
    PartialAnnotation,
    Provenance,
    VaAnnotation,
)
from .prompts import find_label_tokens
from .uamc import UamcResult, task_uncertainties


class AssemblyError(ValueError):
    pass


class IncompleteLabels(AssemblyError):
    """The finalized labels do not cover all three tasks."""


class LabelLeak(AssemblyError):
    """The question text contains label tokens."""


class EmptyAnswer(AssemblyError):
    """The answer text is empty."""


class SchemaError(Exception):
    """A JSONL line does not match the record schema."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateSplit(ValueError):
    """Fewer than two subjects; a subject-independent split is impossible."""


EPOCH_TIMESTAMP = "1970-01-01T00:00:00Z"


def utc_timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class GeneratorInfo:
    model: str
    seed: int
    timestamp: str


@dataclass(frozen=True)
class UncertaintySummary:
    """Final round count and per-task normalized uncertainty (sampled tasks only)."""

    final_s: int
    per_task: Mapping[str, float]


@dataclass(frozen=True)
class FeidRecord:
    """One instruction-tuning record with complete labels."""

    record_id: str
    image_ref: str
    question: str
    answer: str
    labels: PartialAnnotation
    uncertainty: UncertaintySummary
    generator: GeneratorInfo


def assemble_record(
    record: EmotionRecord,
    uamc_result: UamcResult,
    final_labels: PartialAnnotation,
    question: str,
    answer: str,
    *,
    generator: GeneratorInfo,
    vocab,
    au_aggregate: str = "mean",
) -> FeidRecord:
    """Build the instruction record, enforcing the assembly invariants."""
    if not final_labels.is_complete():
        raise IncompleteLabels(f"record {record.record_id}: labels must cover all tasks")
    leaks = find_label_tokens(question)
    if leaks:
        raise LabelLeak(f"record {record.record_id}: question leaks labels: {leaks}")
    if not answer.strip():
        raise EmptyAnswer(f"record {record.record_id}: answer is empty")
    per_task: dict[str, float] = {}
    if uamc_result.final_s >= 2:
        targets = record.annotation.missing()
        stats = task_uncertainties(
            uamc_result.samples,
            targets,
            vocab,
            round_index=uamc_result.final_s,
            au_aggregate=au_aggregate,
        )
        per_task = {s.task.value: float(s.normalized) for s in stats}
    return FeidRecord(
        record_id=record.record_id,
        image_ref=record.image_ref,
        question=question,
        answer=answer,
        labels=final_labels,
        uncertainty=UncertaintySummary(final_s=uamc_result.final_s, per_task=per_task),
        generator=generator,
    )


# --- canonical JSON form ----------------------------------------------------------


def _provenance_to_json(prov: Provenance) -> dict:
    return {
        "origin": prov.origin.value,
        "source_dataset": prov.source_dataset,
        "generator_run_id": prov.generator_run_id,
    }


def record_to_json(rec: FeidRecord) -> dict:
    labels = rec.labels
    expr, expr_prov = labels.expression
    va, va_prov = labels.va
    aus, aus_prov = labels.aus
    return {
        "record_id": rec.record_id,
        "image_ref": rec.image_ref,
        "question": rec.question,
        "answer": rec.answer,
        "labels": {
            "expression": expr.value,
            "valence": float(va.valence),
            "arousal": float(va.arousal),
            "aus": {str(a): bool(on) for a, on in sorted(aus.occurrences.items())},
            "provenance": {
                "expression": _provenance_to_json(expr_prov),
                "va": _provenance_to_json(va_prov),
                "aus": _provenance_to_json(aus_prov),
            },
        },
        "uncertainty": {
            "final_s": rec.uncertainty.final_s,
            "per_task": {
                t.value: float(rec.uncertainty.per_task[t.value])
                for t in TASK_ORDER
                if t.value in rec.uncertainty.per_task
            },
        },
        "generator": {
            "model": rec.generator.model,
            "seed": rec.generator.seed,
            "timestamp": rec.generator.timestamp,
        },
    }


def to_json_line(rec: FeidRecord) -> str:
    return json.dumps(record_to_json(rec), ensure_ascii=False, separators=(",", ":"))


def _expect(obj: Mapping, key: str, kinds, where: str):
    if key not in obj:
        raise ValueError(f"{where}: missing key {key!r}")
    value = obj[key]
    if kinds is not None and not isinstance(value, kinds):
        raise ValueError(f"{where}: key {key!r} has wrong type {type(value).__name__}")
    return value


def _provenance_from_json(obj, where: str) -> Provenance:
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: provenance must be an object")
    origin = _expect(obj, "origin", str, where)
    try:
        origin = Origin(origin)
    except ValueError:
        raise ValueError(f"{where}: unknown origin {origin!r}") from None
    source = _expect(obj, "source_dataset", str, where)
    run_id = obj.get("generator_run_id")
    if run_id is not None and not isinstance(run_id, str):
        raise ValueError(f"{where}: generator_run_id must be a string or null")
    return Provenance(origin, source_dataset=source, generator_run_id=run_id)


def record_from_json(obj: Mapping) -> FeidRecord:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    rid = _expect(obj, "record_id", str, "record")
    image_ref = _expect(obj, "image_ref", str, "record")
    question = _expect(obj, "question", str, "record")
    answer = _expect(obj, "answer", str, "record")
    labels = _expect(obj, "labels", dict, "record")

    expr_name = _expect(labels, "expression", str, "labels")
    try:
        expr = ExpressionLabel(expr_name)
    except ValueError:
        raise ValueError(f"labels: unknown expression {expr_name!r}") from None
    valence = _expect(labels, "valence", (int, float), "labels")
    arousal = _expect(labels, "arousal", (int, float), "labels")
    if isinstance(valence, bool) or isinstance(arousal, bool):
        raise ValueError("labels: valence/arousal must be numbers")
    aus_obj = _expect(labels, "aus", dict, "labels")
    occurrences: dict[int, bool] = {}
    for key, bit in aus_obj.items():
        try:
            au = int(key)
        except (TypeError, ValueError):
            raise ValueError(f"labels.aus: bad au id {key!r}") from None
        if not isinstance(bit, bool):
            raise ValueError(f"labels.aus: value for {key!r} must be a boolean")
        occurrences[au] = bit
    prov_obj = _expect(labels, "provenance", dict, "labels")
    provs = {
        name: _provenance_from_json(
            _expect(prov_obj, name, dict, "labels.provenance"), f"labels.provenance.{name}"
        )
        for name in ("expression", "va", "aus")
    }

    unc_obj = _expect(obj, "uncertainty", dict, "record")
    final_s = _expect(unc_obj, "final_s", int, "uncertainty")
    if isinstance(final_s, bool):
        raise ValueError("uncertainty: final_s must be an integer")
    per_task_obj = _expect(unc_obj, "per_task", dict, "uncertainty")
    per_task: dict[str, float] = {}
    for key, value in per_task_obj.items():
        if key not in (t.value for t in TASK_ORDER):
            raise ValueError(f"uncertainty.per_task: unknown task {key!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"uncertainty.per_task: {key!r} must be a number")
        per_task[key] = float(value)

    gen_obj = _expect(obj, "generator", dict, "record")
    model = _expect(gen_obj, "model", str, "generator")
    seed = _expect(gen_obj, "seed", int, "generator")
    if isinstance(seed, bool):
        raise ValueError("generator: seed must be an integer")
    timestamp = _expect(gen_obj, "timestamp", str, "generator")

    labels_value = PartialAnnotation(
        expression=(expr, provs["expression"]),
        va=(VaAnnotation(float(valence), float(arousal)), provs["va"]),
        aus=(AuAnnotation(dict(sorted(occurrences.items()))), provs["aus"]),
    )
    return FeidRecord(
        record_id=rid,
        image_ref=image_ref,
        question=question,
        answer=answer,
        labels=labels_value,
        uncertainty=UncertaintySummary(final_s=final_s, per_task=per_task),
        generator=GeneratorInfo(model=model, seed=seed, timestamp=timestamp),
    )


def write_jsonl(records: Iterable[FeidRecord], path: str) -> None:
    """Write records one per line under an exclusive lock."""
    with open(path, "w", encoding="utf-8") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            for rec in records:
                fh.write(to_json_line(rec) + "\n")
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def read_jsonl(path: str) -> list[FeidRecord]:
    """Read a record file; empty files yield an empty list.

    Raises :class:`SchemaError` carrying the 1-based line number of the
    first malformed line.
    """
    out: list[FeidRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                raise SchemaError(line_no, "blank line")
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, f"invalid JSON: {exc}") from None
            try:
                out.append(record_from_json(obj))
            except ValueError as exc:
                raise SchemaError(line_no, str(exc)) from None
    return out


def records_equal(a: FeidRecord, b: FeidRecord) -> bool:
    """Semantic equality; generator timestamps are excluded."""
    ja, jb = record_to_json(a), record_to_json(b)
    ja["generator"] = dict(ja["generator"], timestamp="")
    jb["generator"] = dict(jb["generator"], timestamp="")
    return ja == jb


def to_conversation(rec: FeidRecord) -> dict:
    """Conversation-style view of one record."""
    return {
        "id": rec.record_id,
        "image": rec.image_ref,
        "conversations": [
            {"from": "human", "value": rec.question},
            {"from": "gpt", "value": rec.answer},
        ],
    }


def export_conversations(records: Iterable[FeidRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(to_conversation(rec), ensure_ascii=False, separators=(",", ":")) + "\n")


# --- subject-independent splitting -------------------------------------------------


@dataclass(frozen=True)
class SplitManifest:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    fraction: float
    seed: int


def split_subjects(
    records: Sequence[EmotionRecord], fraction: float, seed: int
) -> SplitManifest:
    """Partition records by subject so no subject appears on both sides.

    Records without a subject id count as singleton subjects.  The test
    side receives ``round(fraction * subject_count)`` subjects, chosen by a
    seeded shuffle; equal seeds give equal splits.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1): {fraction}")
    by_subject: dict[str, list[str]] = {}
    for rec in records:
        key = rec.subject_id if rec.subject_id else f"::{rec.record_id}"
        by_subject.setdefault(key, []).append(rec.record_id)
    subjects = sorted(by_subject)
    if len(subjects) < 2:
        raise DegenerateSplit(f"need at least 2 subjects, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = list(subjects)
    rng.shuffle(order)
    n_test = int(round(fraction * len(subjects)))
    test_subjects = set(order[:n_test])
    train_ids: list[str] = []
    test_ids: list[str] = []
    for rec in records:
        key = rec.subject_id if rec.subject_id else f"::{rec.record_id}"
        (test_ids if key in test_subjects else train_ids).append(rec.record_id)
    return SplitManifest(
        train_ids=tuple(train_ids),
        test_ids=tuple(test_ids),
        fraction=fraction,
        seed=seed,
    )


def split_to_json(split: SplitManifest) -> dict:
    return {
        "train_ids": list(split.train_ids),
        "test_ids": list(split.test_ids),
        "fraction": split.fraction,
        "seed": split.seed,
    }


def write_split(split: SplitManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split_to_json(split), fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


def is_fully_manual(rec: FeidRecord) -> bool:
    return all(
        rec.labels.get(task)[1].origin is Origin.MANUAL for task in TASK_ORDER
    )


def select_benchmark_records(
    records: Iterable[FeidRecord], split: SplitManifest
) -> list[FeidRecord]:
    """Benchmark assembly: test-split records whose labels are manual on all
    three tasks.  Generated labels never enter the benchmark."""
    test_ids = set(split.test_ids)
    return [r for r in records if r.record_id in test_ids and is_fully_manual(r)]

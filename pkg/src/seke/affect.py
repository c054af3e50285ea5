"""Core domain model for multi-grained facial-emotion annotations.

Shared vocabulary and record types for the three description tasks
(discrete expression, valence-arousal, action units), together with
record validation and manifest ingestion.  Everything here is an
immutable value object; validation reports violations as data instead
of raising, so partially labeled or out-of-range records can still be
carried around and inspected.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional


class ExpressionLabel(enum.Enum):
    """The eight discrete expression categories."""

    NEUTRAL = "neutral"
    HAPPINESS = "happiness"
    SADNESS = "sadness"
    SURPRISE = "surprise"
    FEAR = "fear"
    DISGUST = "disgust"
    ANGER = "anger"
    CONTEMPT = "contempt"


EXPRESSION_CATEGORIES: tuple[str, ...] = tuple(e.value for e in ExpressionLabel)
CATEGORY_COUNT: int = len(EXPRESSION_CATEGORIES)

#: Free-text term -> category.  Consumed by the evaluator's extraction rules
#: (longest match wins) and by the rewrite-template leak scanner.
EXPRESSION_LEXICON: dict[str, ExpressionLabel] = {
    "neutral": ExpressionLabel.NEUTRAL,
    "expressionless": ExpressionLabel.NEUTRAL,
    "happiness": ExpressionLabel.HAPPINESS,
    "happy": ExpressionLabel.HAPPINESS,
    "joyful": ExpressionLabel.HAPPINESS,
    "cheerful": ExpressionLabel.HAPPINESS,
    "sadness": ExpressionLabel.SADNESS,
    "sad": ExpressionLabel.SADNESS,
    "unhappy": ExpressionLabel.SADNESS,
    "sorrowful": ExpressionLabel.SADNESS,
    "surprise": ExpressionLabel.SURPRISE,
    "surprised": ExpressionLabel.SURPRISE,
    "astonished": ExpressionLabel.SURPRISE,
    "fear": ExpressionLabel.FEAR,
    "fearful": ExpressionLabel.FEAR,
    "afraid": ExpressionLabel.FEAR,
    "scared": ExpressionLabel.FEAR,
    "terrified": ExpressionLabel.FEAR,
    "disgust": ExpressionLabel.DISGUST,
    "disgusted": ExpressionLabel.DISGUST,
    "repulsed": ExpressionLabel.DISGUST,
    "anger": ExpressionLabel.ANGER,
    "angry": ExpressionLabel.ANGER,
    "furious": ExpressionLabel.ANGER,
    "contempt": ExpressionLabel.CONTEMPT,
    "contemptuous": ExpressionLabel.CONTEMPT,
    "scornful": ExpressionLabel.CONTEMPT,
    "disdainful": ExpressionLabel.CONTEMPT,
}


class TaskKind(enum.Enum):
    """The three annotation tasks.  Values double as JSON keys."""

    EXPRESSION = "expression"
    VALENCE_AROUSAL = "va"
    ACTION_UNITS = "aus"


TASK_ORDER: tuple[TaskKind, ...] = (
    TaskKind.EXPRESSION,
    TaskKind.VALENCE_AROUSAL,
    TaskKind.ACTION_UNITS,
)
ALL_TASKS: frozenset[TaskKind] = frozenset(TASK_ORDER)


class Origin(enum.Enum):
    MANUAL = "manual"
    GENERATED = "generated"


#: Default occurrence vocabulary: the union of the AU sets carried by the
#: supported source corpora (12-AU, 8-AU and 12-AU sets respectively).
DEFAULT_AU_IDS: tuple[int, ...] = (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 24, 25, 26)


def occurrence_from_intensity(intensity: int) -> bool:
    """Map a 0-5 intensity code to occurrence: intensities above 2 count as active."""
    return intensity > 2


@dataclass(frozen=True)
class AuVocabulary:
    """The active set of action-unit ids, strictly ascending."""

    au_ids: tuple[int, ...] = DEFAULT_AU_IDS

    def __post_init__(self) -> None:
        if not self.au_ids:
            raise ValueError("au vocabulary must be nonempty")
        if any(not isinstance(a, int) or a <= 0 for a in self.au_ids):
            raise ValueError("au ids must be positive integers")
        if any(b <= a for a, b in zip(self.au_ids, self.au_ids[1:])):
            raise ValueError("au ids must be strictly ascending")

    def __contains__(self, au_id: int) -> bool:
        return au_id in self.au_ids

    def __len__(self) -> int:
        return len(self.au_ids)

    def __iter__(self):
        return iter(self.au_ids)

    @classmethod
    def default(cls) -> "AuVocabulary":
        return cls(DEFAULT_AU_IDS)


@dataclass(frozen=True)
class AuAnnotation:
    """Occurrence map over the active vocabulary (dense: one entry per id)."""

    occurrences: Mapping[int, bool]

    def active(self) -> tuple[int, ...]:
        return tuple(sorted(a for a, on in self.occurrences.items() if on))

    @classmethod
    def from_intensities(cls, intensities: Mapping[int, int]) -> "AuAnnotation":
        return cls({a: occurrence_from_intensity(v) for a, v in sorted(intensities.items())})

    @classmethod
    def dense(cls, vocab: AuVocabulary, active: Iterable[int] = ()) -> "AuAnnotation":
        on = set(active)
        return cls({a: a in on for a in vocab})


@dataclass(frozen=True)
class VaAnnotation:
    """Continuous valence and arousal, nominally in [-1, 1]."""

    valence: float
    arousal: float


@dataclass(frozen=True)
class Provenance:
    """Where a label came from.

    Manual labels must name their source dataset; generated labels may
    carry the id of the run that produced them.
    """

    origin: Origin
    source_dataset: str = ""
    generator_run_id: Optional[str] = None


@dataclass(frozen=True)
class PartialAnnotation:
    """Per-task labels with per-task provenance; any subset may be present."""

    expression: Optional[tuple[ExpressionLabel, Provenance]] = None
    va: Optional[tuple[VaAnnotation, Provenance]] = None
    aus: Optional[tuple[AuAnnotation, Provenance]] = None

    def get(self, task: TaskKind):
        if task is TaskKind.EXPRESSION:
            return self.expression
        if task is TaskKind.VALENCE_AROUSAL:
            return self.va
        return self.aus

    def value(self, task: TaskKind):
        pair = self.get(task)
        return None if pair is None else pair[0]

    def present(self) -> frozenset[TaskKind]:
        return frozenset(t for t in TASK_ORDER if self.get(t) is not None)

    def missing(self) -> frozenset[TaskKind]:
        return ALL_TASKS - self.present()

    def is_complete(self) -> bool:
        return not self.missing()

    def is_empty(self) -> bool:
        return not self.present()


@dataclass(frozen=True)
class EmotionRecord:
    """One image with a partial annotation."""

    record_id: str
    image_ref: str
    annotation: PartialAnnotation
    subject_id: Optional[str] = None


@dataclass(frozen=True)
class Violation:
    """A single validation finding; ``code`` is stable and machine readable."""

    code: str
    message: str


def missing_tasks(record: EmotionRecord) -> frozenset[TaskKind]:
    """The annotation tasks absent from ``record``."""
    return record.annotation.missing()


def present_tasks(record: EmotionRecord) -> frozenset[TaskKind]:
    return record.annotation.present()


def _check_provenance(prov: Provenance, where: str, out: list[Violation]) -> None:
    if prov.origin is Origin.MANUAL and not prov.source_dataset:
        out.append(
            Violation(
                f"{where}.provenance.source_dataset.empty",
                f"{where}: manual provenance requires a nonempty source_dataset",
            )
        )


def validate_record(record: EmotionRecord, vocab: AuVocabulary) -> list[Violation]:
    """Check ``record`` against the domain invariants.

    Returns the (possibly empty) list of violations; never raises.  Pure:
    calling it twice on the same inputs yields equal results.
    """
    out: list[Violation] = []
    if not record.record_id:
        out.append(Violation("record_id.empty", "record_id must be nonempty"))
    if not record.image_ref:
        out.append(Violation("image_ref.empty", "image_ref must be nonempty"))
    ann = record.annotation
    if ann.is_empty():
        out.append(Violation("annotation.empty", "annotation empty: no task is labeled"))
    if ann.expression is not None:
        label, prov = ann.expression
        if not isinstance(label, ExpressionLabel):
            out.append(Violation("expression.unknown", f"unknown expression label {label!r}"))
        _check_provenance(prov, "expression", out)
    if ann.va is not None:
        va, prov = ann.va
        if not -1.0 <= va.valence <= 1.0:
            out.append(Violation("va.valence.range", f"va.valence out of [-1,1]: {va.valence}"))
        if not -1.0 <= va.arousal <= 1.0:
            out.append(Violation("va.arousal.range", f"va.arousal out of [-1,1]: {va.arousal}"))
        _check_provenance(prov, "va", out)
    if ann.aus is not None:
        aus, prov = ann.aus
        for au in sorted(aus.occurrences):
            if au not in vocab:
                out.append(Violation("aus.unknown_id", f"au id not in vocabulary: {au}"))
        for au in vocab:
            if au not in aus.occurrences:
                out.append(Violation("aus.missing_id", f"au occurrence map is sparse: missing {au}"))
        _check_provenance(prov, "aus", out)
    return out


class ManifestFormatError(Exception):
    """The manifest file itself is unusable (bad header, wrong columns)."""


@dataclass(frozen=True)
class ManifestRowError:
    """A row that could not be turned into a record."""

    row: int
    record_id: str
    reason: str


_REQUIRED_COLUMNS = (
    "record_id",
    "image_ref",
    "subject_id",
    "source_dataset",
    "expression",
    "valence",
    "arousal",
)


def _parse_au_cells(
    cells: dict[int, str], au_mode: str
) -> Optional[AuAnnotation]:
    filled = {a: v for a, v in cells.items() if v != ""}
    if not filled:
        return None
    if len(filled) != len(cells):
        missing = sorted(set(cells) - set(filled))
        raise ValueError(f"aus.sparse: au columns partially filled, missing {missing}")
    occ: dict[int, bool] = {}
    for au in sorted(cells):
        raw = cells[au]
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"au_{au}: not an integer: {raw!r}") from None
        if au_mode == "occurrence":
            if value not in (0, 1):
                raise ValueError(f"au_{au}: occurrence cell must be 0 or 1, got {value}")
            occ[au] = bool(value)
        else:
            if not 0 <= value <= 5:
                raise ValueError(f"au_{au}: intensity cell must be in 0..5, got {value}")
            occ[au] = occurrence_from_intensity(value)
    return AuAnnotation(occ)


def load_manifest(
    path: str, au_mode: str = "occurrence"
) -> tuple[list[EmotionRecord], list[ManifestRowError]]:
    """Read a manifest CSV into records.

    Empty cells mean the task is absent.  ``au_mode`` selects how the
    ``au_<id>`` columns are read: ``"occurrence"`` expects 0/1 cells,
    ``"intensity"`` expects 0-5 codes mapped through the >2 rule.  Rows
    that cannot be constructed at all are returned as errors; range or
    density problems on constructed records are left to
    :func:`validate_record`.
    """
    if au_mode not in ("occurrence", "intensity"):
        raise ValueError(f"unknown au_mode: {au_mode!r}")
    records: list[EmotionRecord] = []
    errors: list[ManifestRowError] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing_cols = [c for c in _REQUIRED_COLUMNS if c not in header]
        if missing_cols:
            raise ManifestFormatError(f"manifest missing columns: {missing_cols}")
        au_columns: dict[int, str] = {}
        for col in header:
            if col.startswith("au_"):
                try:
                    au_columns[int(col[3:])] = col
                except ValueError:
                    raise ManifestFormatError(f"bad au column name: {col!r}") from None
        for row_no, row in enumerate(reader, start=2):
            rid = (row.get("record_id") or "").strip()
            try:
                records.append(_row_to_record(row, au_columns, au_mode))
            except ValueError as exc:
                errors.append(ManifestRowError(row=row_no, record_id=rid, reason=str(exc)))
    return records, errors


def _row_to_record(
    row: Mapping[str, str], au_columns: Mapping[int, str], au_mode: str
) -> EmotionRecord:
    rid = (row.get("record_id") or "").strip()
    image_ref = (row.get("image_ref") or "").strip()
    subject = (row.get("subject_id") or "").strip() or None
    source = (row.get("source_dataset") or "").strip()
    prov = Provenance(Origin.MANUAL, source_dataset=source)

    expression = None
    expr_cell = (row.get("expression") or "").strip()
    if expr_cell:
        try:
            expression = (ExpressionLabel(expr_cell.lower()), prov)
        except ValueError:
            raise ValueError(f"expression: unknown category {expr_cell!r}") from None

    va = None
    v_cell = (row.get("valence") or "").strip()
    a_cell = (row.get("arousal") or "").strip()
    if v_cell or a_cell:
        if not (v_cell and a_cell):
            raise ValueError("va.partial: valence and arousal must both be filled or both empty")
        try:
            va = (VaAnnotation(float(v_cell), float(a_cell)), prov)
        except ValueError:
            raise ValueError(f"va: not a number: {v_cell!r}/{a_cell!r}") from None

    aus = None
    cells = {a: (row.get(col) or "").strip() for a, col in au_columns.items()}
    parsed = _parse_au_cells(cells, au_mode)
    if parsed is not None:
        aus = (parsed, prov)

    return EmotionRecord(
        record_id=rid,
        image_ref=image_ref,
        annotation=PartialAnnotation(expression=expression, va=va, aus=aus),
        subject_id=subject,
    )

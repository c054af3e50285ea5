"""Benchmark scoring of free-form annotator outputs.

Rule-based extraction turns a model's prose into the three structured
tasks; scoring aligns predictions with gold records by id and reports
accuracy, per-AU and macro F1, and mean absolute error for valence and
arousal (root-mean-square errors are carried alongside as auxiliary
fields).  An output from which nothing can be extracted is unparseable:
it counts as wrong for the expression task and all-inactive for action
units, and it is excluded from the valence-arousal averages.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .affect import (
    EXPRESSION_LEXICON,
    TASK_ORDER,
    AuAnnotation,
    AuVocabulary,
    ExpressionLabel,
    Origin,
    PartialAnnotation,
    Provenance,
    TaskKind,
    VaAnnotation,
)
from .prompts import PromptText, schema_id_for


class LengthMismatch(ValueError):
    """Metric inputs must have equal, nonzero length."""


class AlignmentError(Exception):
    """Prediction and gold record ids do not line up."""

    def __init__(self, unmatched: Sequence[str]):
        super().__init__(f"unmatched record ids: {list(unmatched)}")
        self.unmatched = tuple(unmatched)


# --- rule-based extraction ---------------------------------------------------------

_TERMS = sorted(EXPRESSION_LEXICON, key=len, reverse=True)
_EXPR_SCAN = re.compile(r"\b(" + "|".join(re.escape(t) for t in _TERMS) + r")\b", re.IGNORECASE)
_AU_SCAN = re.compile(r"\bAU\s?0*(\d{1,2})\b", re.IGNORECASE)
_VALENCE = re.compile(r"\bvalence\b[^-+0-9]{0,16}([-+]?\d+(?:\.\d+)?)", re.IGNORECASE)
_AROUSAL = re.compile(r"\barousal\b[^-+0-9]{0,16}([-+]?\d+(?:\.\d+)?)", re.IGNORECASE)


def _extract_expression(text: str) -> Optional[ExpressionLabel]:
    best: Optional[tuple[int, int, ExpressionLabel]] = None
    for m in _EXPR_SCAN.finditer(text):
        term = m.group(1).lower()
        candidate = (-len(term), m.start(), EXPRESSION_LEXICON[term])
        if best is None or candidate < best:
            best = candidate
    return best[2] if best else None


def _extract_va(text: str) -> Optional[VaAnnotation]:
    vm, am = _VALENCE.search(text), _AROUSAL.search(text)
    if vm is None or am is None:
        return None
    valence, arousal = float(vm.group(1)), float(am.group(1))
    if not (-1.0 <= valence <= 1.0 and -1.0 <= arousal <= 1.0):
        return None
    return VaAnnotation(valence, arousal)


def _extract_aus(text: str, vocab: AuVocabulary) -> Optional[AuAnnotation]:
    mentioned = {int(m.group(1)) for m in _AU_SCAN.finditer(text)}
    valid = mentioned & set(vocab)
    if not valid:
        return None
    return AuAnnotation({a: a in valid for a in vocab})


def normalize_output(text: str, vocab: AuVocabulary) -> Optional[PartialAnnotation]:
    """Extract structured predictions from free-form text.

    Expression terms are matched longest-first against the category
    lexicon; valence and arousal come from labeled decimals; action units
    from ``AU<id>`` mentions (ids outside the vocabulary are ignored).
    Returns ``None`` when nothing at all can be extracted (unparseable).
    """
    prov = Provenance(Origin.GENERATED)
    expr = _extract_expression(text)
    va = _extract_va(text)
    aus = _extract_aus(text, vocab)
    if expr is None and va is None and aus is None:
        return None
    return PartialAnnotation(
        expression=(expr, prov) if expr is not None else None,
        va=(va, prov) if va is not None else None,
        aus=(aus, prov) if aus is not None else None,
    )


_LLM_NORMALIZE_SYSTEM = (
    "You convert free-form facial-emotion analyses into structured annotations "
    "without adding information that is not in the text."
)


def llm_normalize_output(
    text: str, annotator, vocab: AuVocabulary, *, rng=None
) -> Optional[PartialAnnotation]:
    """Second-pass extraction through the annotator client.

    Sends the free-form output with a fixed conversion instruction and
    parses the structured reply; returns ``None`` when the reply cannot be
    parsed either.
    """
    ids = ", ".join(str(a) for a in vocab)
    user = (
        "Convert the following emotion analysis into structured form. If a field "
        "is not stated, infer the closest match from the text.\n\n"
        f"---\n{text}\n---\n\n"
        "Respond with a single fenced JSON block containing exactly these keys: "
        '"expression", "valence", "arousal", "aus". "aus" must map every id in '
        f"{{{ids}}} to true or false."
    )
    prompt = PromptText(
        system=_LLM_NORMALIZE_SYSTEM,
        user=user,
        image_attached=False,
        response_schema_id=schema_id_for(TASK_ORDER),
    )
    from .annotator import DecodingParams

    response = annotator.complete(
        prompt, "", DecodingParams(temperature=0.2, round_index=1), rng=rng
    )
    return response.parsed


# --- prediction files ----------------------------------------------------------------


def _labels_value_from_json(obj: Mapping, where: str) -> PartialAnnotation:
    """Parse a structured prediction's ``labels`` object.

    Any subset of the tasks may be present; provenance is not required of
    predictions.
    """
    prov = Provenance(Origin.GENERATED)
    expression = va = aus = None
    if "expression" in obj:
        name = obj["expression"]
        if not isinstance(name, str):
            raise ValueError(f"{where}: expression must be a string")
        try:
            expression = (ExpressionLabel(name.strip().lower()), prov)
        except ValueError:
            raise ValueError(f"{where}: unknown expression {name!r}") from None
    if ("valence" in obj) != ("arousal" in obj):
        raise ValueError(f"{where}: valence and arousal must come together")
    if "valence" in obj:
        pair = []
        for key in ("valence", "arousal"):
            value = obj[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{where}: {key} must be a number")
            pair.append(float(value))
        va = (VaAnnotation(pair[0], pair[1]), prov)
    if "aus" in obj:
        value = obj["aus"]
        if not isinstance(value, dict):
            raise ValueError(f"{where}: aus must be an object")
        occ: dict[int, bool] = {}
        for key, bit in value.items():
            try:
                au = int(key)
            except (TypeError, ValueError):
                raise ValueError(f"{where}: bad au id {key!r}") from None
            if isinstance(bit, bool):
                occ[au] = bit
            elif isinstance(bit, int) and bit in (0, 1):
                occ[au] = bool(bit)
            else:
                raise ValueError(f"{where}: au {au} value must be boolean or 0/1")
        aus = (AuAnnotation(dict(sorted(occ.items()))), prov)
    return PartialAnnotation(expression=expression, va=va, aus=aus)


def read_predictions(
    path: str,
    vocab: AuVocabulary,
    *,
    llm_annotator=None,
    rng=None,
) -> list[tuple[str, Optional[PartialAnnotation]]]:
    """Read a predictions JSONL file.

    Each line carries ``record_id`` plus either free-form ``output_text``
    (run through rule-based extraction, with an optional second pass through
    ``llm_annotator`` when the rules fail) or a structured ``labels`` object.
    Raises :class:`~seke.dataset.SchemaError` with the offending line number.
    """
    from .dataset import SchemaError

    out: list[tuple[str, Optional[PartialAnnotation]]] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                raise SchemaError(line_no, "blank line")
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, f"invalid JSON: {exc}") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("record_id"), str):
                raise SchemaError(line_no, "prediction must carry a string record_id")
            rid = obj["record_id"]
            if "labels" in obj:
                if not isinstance(obj["labels"], dict):
                    raise SchemaError(line_no, "labels must be an object")
                try:
                    parsed = _labels_value_from_json(obj["labels"], "labels")
                except ValueError as exc:
                    raise SchemaError(line_no, str(exc)) from None
                out.append((rid, parsed if not parsed.is_empty() else None))
            elif "output_text" in obj:
                raw = obj["output_text"]
                if not isinstance(raw, str):
                    raise SchemaError(line_no, "output_text must be a string")
                parsed = normalize_output(raw, vocab)
                if parsed is None and llm_annotator is not None:
                    parsed = llm_normalize_output(raw, llm_annotator, vocab, rng=rng)
                out.append((rid, parsed))
            else:
                raise SchemaError(line_no, "prediction needs output_text or labels")
    return out


# --- metrics -------------------------------------------------------------------------


def _check_lengths(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise LengthMismatch(f"length mismatch: {len(preds)} vs {len(golds)}")
    if not golds:
        raise LengthMismatch("empty inputs")


def f1_positive(preds: Sequence[bool], golds: Sequence[bool]) -> float:
    """F1 of the positive class: ``2pr / (p + r)``, and 0 when both the
    precision and recall denominators are empty."""
    _check_lengths(preds, golds)
    tp = sum(1 for p, g in zip(preds, golds) if p and g)
    fp = sum(1 for p, g in zip(preds, golds) if p and not g)
    fn = sum(1 for p, g in zip(preds, golds) if not p and g)
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def mae(preds: Sequence[float], golds: Sequence[float]) -> float:
    """Plain mean absolute error."""
    _check_lengths(preds, golds)
    return sum(abs(p - g) for p, g in zip(preds, golds)) / len(golds)


def rmse(preds: Sequence[float], golds: Sequence[float]) -> float:
    _check_lengths(preds, golds)
    return math.sqrt(sum((p - g) ** 2 for p, g in zip(preds, golds)) / len(golds))


def expression_accuracy(
    preds: Sequence[Optional[ExpressionLabel]], golds: Sequence[ExpressionLabel]
) -> float:
    """Fraction of exact category matches; a missing prediction is wrong."""
    _check_lengths(preds, golds)
    return sum(1 for p, g in zip(preds, golds) if p is g) / len(golds)


@dataclass(frozen=True)
class EvalReport:
    expression_accuracy: float
    au_f1: Mapping[int, float]
    au_f1_macro: float
    valence_mae: float
    arousal_mae: float
    valence_rmse: float
    arousal_rmse: float
    n_scored: int
    n_unparseable: int
    n_va_pairs: int
    va_within_tolerance: Optional[float] = None
    va_tolerance: Optional[float] = None


def score(
    preds: Sequence[tuple[str, Optional[PartialAnnotation]]],
    golds: Sequence[tuple[str, PartialAnnotation]],
    vocab: AuVocabulary,
    *,
    va_tolerance: Optional[float] = None,
) -> EvalReport:
    """Score aligned predictions against gold annotations.

    ``preds`` and ``golds`` must carry exactly the same record ids (an
    :class:`AlignmentError` lists any mismatch).  Per-AU F1 is computed over
    the configured vocabulary and macro F1 is their unweighted mean.
    """
    pred_ids = [rid for rid, _ in preds]
    gold_ids = [rid for rid, _ in golds]
    if len(set(pred_ids)) != len(pred_ids) or len(set(gold_ids)) != len(gold_ids):
        dupes = sorted(
            {r for r in pred_ids if pred_ids.count(r) > 1}
            | {r for r in gold_ids if gold_ids.count(r) > 1}
        )
        raise AlignmentError(dupes)
    unmatched = sorted(set(pred_ids) ^ set(gold_ids))
    if unmatched:
        raise AlignmentError(unmatched)

    by_id = dict(preds)
    ordered = sorted(golds, key=lambda pair: pair[0])

    expr_preds: list[Optional[ExpressionLabel]] = []
    expr_golds: list[ExpressionLabel] = []
    au_preds: dict[int, list[bool]] = {a: [] for a in vocab}
    au_golds: dict[int, list[bool]] = {a: [] for a in vocab}
    v_preds: list[float] = []
    v_golds: list[float] = []
    a_preds: list[float] = []
    a_golds: list[float] = []
    n_unparseable = 0

    for rid, gold in ordered:
        pred = by_id[rid]
        if pred is None:
            n_unparseable += 1
        if gold.expression is not None:
            expr_golds.append(gold.expression[0])
            expr_preds.append(pred.value(TaskKind.EXPRESSION) if pred else None)
        if gold.aus is not None:
            gold_occ = gold.aus[0].occurrences
            pred_occ = (
                pred.aus[0].occurrences if pred is not None and pred.aus is not None else {}
            )
            for au in vocab:
                au_golds[au].append(bool(gold_occ.get(au, False)))
                au_preds[au].append(bool(pred_occ.get(au, False)))
        if gold.va is not None and pred is not None and pred.va is not None:
            v_golds.append(gold.va[0].valence)
            v_preds.append(pred.va[0].valence)
            a_golds.append(gold.va[0].arousal)
            a_preds.append(pred.va[0].arousal)

    accuracy = expression_accuracy(expr_preds, expr_golds) if expr_golds else 0.0
    au_f1 = {
        a: f1_positive(au_preds[a], au_golds[a]) if au_golds[a] else 0.0 for a in vocab
    }
    macro = sum(au_f1.values()) / len(au_f1) if au_f1 else 0.0
    valence_mae = mae(v_preds, v_golds) if v_golds else 0.0
    arousal_mae = mae(a_preds, a_golds) if a_golds else 0.0
    valence_rmse = rmse(v_preds, v_golds) if v_golds else 0.0
    arousal_rmse = rmse(a_preds, a_golds) if a_golds else 0.0

    within = None
    if va_tolerance is not None and v_golds:
        hits = sum(
            1
            for pv, gv, pa, ga in zip(v_preds, v_golds, a_preds, a_golds)
            if abs(pv - gv) <= va_tolerance and abs(pa - ga) <= va_tolerance
        )
        within = hits / len(v_golds)

    return EvalReport(
        expression_accuracy=accuracy,
        au_f1=au_f1,
        au_f1_macro=macro,
        valence_mae=valence_mae,
        arousal_mae=arousal_mae,
        valence_rmse=valence_rmse,
        arousal_rmse=arousal_rmse,
        n_scored=len(ordered) - n_unparseable,
        n_unparseable=n_unparseable,
        n_va_pairs=len(v_golds),
        va_within_tolerance=within,
        va_tolerance=va_tolerance,
    )


def report_to_json(report: EvalReport) -> dict:
    return {
        "expression_accuracy": report.expression_accuracy,
        "au_f1": {str(a): f for a, f in sorted(report.au_f1.items())},
        "au_f1_macro": report.au_f1_macro,
        "valence_mae": report.valence_mae,
        "arousal_mae": report.arousal_mae,
        "valence_rmse": report.valence_rmse,
        "arousal_rmse": report.arousal_rmse,
        "n_scored": report.n_scored,
        "n_unparseable": report.n_unparseable,
        "n_va_pairs": report.n_va_pairs,
        "va_within_tolerance": report.va_within_tolerance,
        "va_tolerance": report.va_tolerance,
    }


def write_report(report: EvalReport, out_dir: str) -> tuple[str, str]:
    """Write ``report.json`` and the one-row ``report.csv`` table
    (expression accuracy, per-AU F1, macro F1, then the VA errors)."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report_to_json(report), fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    csv_path = os.path.join(out_dir, "report.csv")
    aus = sorted(report.au_f1)
    header = (
        ["exp_acc_pct"]
        + [f"au{a}_f1_pct" for a in aus]
        + ["all_f1_pct", "valence_mae", "arousal_mae"]
    )
    row = (
        [f"{100 * report.expression_accuracy:.2f}"]
        + [f"{100 * report.au_f1[a]:.2f}" for a in aus]
        + [
            f"{100 * report.au_f1_macro:.2f}",
            f"{report.valence_mae:.4f}",
            f"{report.arousal_mae:.4f}",
        ]
    )
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)
    return json_path, csv_path

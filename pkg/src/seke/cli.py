"""Command-line interface: generate, evaluate, simulate, inspect.

Exit codes: 0 success, 2 configuration problem, 3 call budget exhausted
(partial output is preserved and resumable), 4 prediction/gold alignment
failure, 5 record schema violation.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .affect import (
    AuAnnotation,
    AuVocabulary,
    EmotionRecord,
    ExpressionLabel,
    ManifestFormatError,
    Origin,
    PartialAnnotation,
    Provenance,
    TaskKind,
    VaAnnotation,
    load_manifest,
    missing_tasks,
    validate_record,
)
from .annotator import (
    AuthError,
    BudgetExceeded,
    CallBudget,
    DecodingParams,
    HttpAnnotator,
    ParseError,
    SyntheticAnnotator,
    SyntheticAnnotatorSpec,
    TransportError,
    parse_structured,
)
from .config import ConfigError, RunConfig, default_config, load_config
from .dataset import (
    EPOCH_TIMESTAMP,
    GeneratorInfo,
    SchemaError,
    assemble_record,
    read_jsonl,
    to_conversation,
    to_json_line,
    utc_timestamp,
)
from .evaluate import AlignmentError, read_predictions, score, write_report
from .prompts import (
    FORMAT_REMINDER,
    build_analysis_prompt,
    build_prior_prompt,
    build_summary_prompt,
    load_rewrite_templates,
    pick_rewrite_question,
)
from .simlab import run_grid, write_grid_csv
from .uamc import (
    AnnotatorExhausted,
    SummaryParseError,
    derive_record_seed,
    finalize_labels,
    run_uamc,
    task_uncertainties,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_ALIGNMENT = 4
EXIT_SCHEMA = 5

ENV_API_KEY = "ANNOTATOR_API_KEY"
ENV_BASE_URL = "ANNOTATOR_BASE_URL"


def _err(message: str) -> None:
    print(f"seke: {message}", file=sys.stderr)


# --- generate ----------------------------------------------------------------------


def _synthetic_truth(
    record: EmotionRecord, vocab: AuVocabulary, rng: np.random.Generator
) -> PartialAnnotation:
    """Hidden ground truth for the offline oracle: manual labels are kept,
    missing tasks are drawn per record from a seed-derived stream."""
    prov = Provenance(Origin.MANUAL, source_dataset="synthetic")
    ann = record.annotation
    expression = ann.expression or (
        list(ExpressionLabel)[int(rng.integers(len(ExpressionLabel)))], prov
    )
    va = ann.va or (
        VaAnnotation(float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-1.0, 1.0))), prov
    )
    aus = ann.aus or (
        AuAnnotation({a: bool(rng.random() < 0.3) for a in vocab}), prov
    )
    return PartialAnnotation(expression=expression, va=va, aus=aus)


def _ask_summary(annotator, prompt, record, cfg: RunConfig, rng):
    """Summary call with format re-asks; raises SummaryParseError after the
    last re-ask fails."""
    response = None
    for ask in range(cfg.annotator.parse_retries + 1):
        asked = prompt if ask == 0 else replace(prompt, user=prompt.user + FORMAT_REMINDER)
        response = annotator.complete(
            asked,
            record.image_ref,
            DecodingParams(
                temperature=cfg.annotator.summary_temperature,
                max_output_tokens=cfg.annotator.max_output_tokens,
                round_index=ask + 1,
            ),
            rng=rng,
        )
        if response.parsed is not None and response.analysis_text:
            return response
    try:
        parse_structured(
            response.raw_text,
            (TaskKind.EXPRESSION, TaskKind.VALENCE_AROUSAL, TaskKind.ACTION_UNITS),
            AuVocabulary.default(),
            require_analysis=True,
        )
    except ParseError as exc:
        raise SummaryParseError(exc.code, str(exc)) from None
    raise SummaryParseError("bad_schema", "summary reply unusable")


def cmd_generate(args) -> int:
    try:
        cfg = load_config(args.config)
        templates = load_rewrite_templates(cfg.prompts.rewrite_templates)
    except (ConfigError, ValueError, OSError) as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    vocab = AuVocabulary.default()
    try:
        records, row_errors = load_manifest(args.manifest, au_mode=cfg.io.au_mode)
    except (ManifestFormatError, OSError) as exc:
        _err(f"manifest error: {exc}")
        return EXIT_CONFIG

    budget = CallBudget(cfg.limits.max_calls)
    master = cfg.uamc.seed
    if args.backend == "http":
        base_url = os.environ.get(ENV_BASE_URL) or cfg.annotator.base_url
        api_key = os.environ.get(ENV_API_KEY, "")
        if not base_url or not api_key:
            _err(
                f"http backend needs {ENV_BASE_URL} (or [annotator].base_url) "
                f"and {ENV_API_KEY}"
            )
            return EXIT_CONFIG
        shared_annotator = HttpAnnotator(
            base_url,
            api_key,
            cfg.annotator.model,
            vocab=vocab,
            budget=budget,
            timeout_s=cfg.annotator.timeout_s,
            retries=cfg.annotator.retries,
            backoff_base_s=cfg.annotator.backoff_base_s,
            rate_limit_per_s=cfg.annotator.rate_limit_per_s,
        )
        timestamp = utc_timestamp()
        model_name = cfg.annotator.model
    else:
        shared_annotator = None
        timestamp = EPOCH_TIMESTAMP
        model_name = "synthetic"
    run_id = f"seke-{args.backend}-{master}"
    generator = GeneratorInfo(model=model_name, seed=master, timestamp=timestamp)

    done_ids: set[str] = set()
    if args.resume and os.path.exists(args.out):
        with open(args.out, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rid = json.loads(line).get("record_id")
                except ValueError:
                    continue
                if isinstance(rid, str):
                    done_ids.add(rid)
    pending = [r for r in records if r.record_id not in done_ids]

    def annotator_for(record: EmotionRecord):
        if shared_annotator is not None:
            return shared_annotator
        truth_rng = np.random.default_rng(
            derive_record_seed(master, record.record_id + "/truth")
        )
        spec = SyntheticAnnotatorSpec(
            _synthetic_truth(record, vocab, truth_rng),
            noise=cfg.annotator.synthetic_noise,
            va_sigma=cfg.annotator.synthetic_va_sigma,
        )
        return SyntheticAnnotator(spec, budget=budget)

    def process(record: EmotionRecord):
        rid = record.record_id
        violations = validate_record(record, vocab)
        if violations:
            return ("skip", {
                "record_id": rid,
                "reason": "invalid",
                "violations": [v.code for v in violations],
            })
        annotator = annotator_for(record)
        targets = missing_tasks(record)
        try:
            if targets:
                if cfg.sampling.paraphrase_rounds:
                    prompt = lambda i: build_prior_prompt(record, targets, vocab, variant=i - 1)
                else:
                    prompt = build_prior_prompt(record, targets, vocab)
                result = run_uamc(
                    record, annotator, prompt, vocab,
                    seed=derive_record_seed(master, rid + "/loop"),
                    max_samples=cfg.uamc.max_samples,
                    au_aggregate=cfg.uamc.au_aggregate,
                    mc_temperature=cfg.annotator.mc_temperature,
                    max_output_tokens=cfg.annotator.max_output_tokens,
                    parse_retries=cfg.annotator.parse_retries,
                )
                stats = task_uncertainties(
                    result.samples, targets, vocab,
                    round_index=result.final_s,
                    au_aggregate=cfg.uamc.au_aggregate,
                )
                summary_prompt = build_summary_prompt(record, result.samples, stats, vocab)
            else:
                result = run_uamc(
                    record, annotator, None, vocab,
                    seed=derive_record_seed(master, rid + "/loop"),
                    max_samples=cfg.uamc.max_samples,
                )
                summary_prompt = build_analysis_prompt(record, vocab)
            summary_rng = np.random.default_rng(derive_record_seed(master, rid + "/summary"))
            summary = _ask_summary(annotator, summary_prompt, record, cfg, summary_rng)
            final_labels = finalize_labels(record, summary, vocab, run_id=run_id)
            question_rng = np.random.default_rng(
                derive_record_seed(master, rid + "/question")
            )
            question = pick_rewrite_question(question_rng, templates)
            feid = assemble_record(
                record, result, final_labels, question, summary.analysis_text,
                generator=generator, vocab=vocab, au_aggregate=cfg.uamc.au_aggregate,
            )
            log_entry = {
                "record_id": rid,
                "final_s": result.final_s,
                "stop_reason": result.stop_reason.value,
                "failed_rounds": result.samples.failed_rounds,
                "calls": getattr(annotator, "calls", None),
                "trajectory": [
                    {
                        "task": t.task.value,
                        "raw": t.raw,
                        "normalized": t.normalized,
                        "round": t.round,
                    }
                    for t in result.trajectory
                ],
            }
            return ("ok", to_json_line(feid), log_entry)
        except AnnotatorExhausted as exc:
            return ("skip", {"record_id": rid, "reason": "annotator_exhausted", "detail": str(exc)})
        except SummaryParseError as exc:
            return ("skip", {"record_id": rid, "reason": "summary_parse", "code": exc.code})
        except TransportError as exc:
            return ("skip", {"record_id": rid, "reason": "transport", "detail": str(exc)})

    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    skipped_path = os.path.join(out_dir, "skipped.jsonl")
    log_path = os.path.join(out_dir, "run_log.jsonl")
    mode = "a" if args.resume else "w"

    written = skipped = 0
    budget_hit = False
    auth_error = None
    with open(args.out, mode, encoding="utf-8") as out_fh, \
            open(skipped_path, mode, encoding="utf-8") as skip_fh, \
            open(log_path, mode, encoding="utf-8") as log_fh:
        fcntl.flock(out_fh.fileno(), fcntl.LOCK_EX)

        def write_skip(entry: dict) -> None:
            nonlocal skipped
            skip_fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
            skip_fh.flush()
            skipped += 1

        for err in row_errors:
            write_skip({
                "record_id": err.record_id,
                "reason": "manifest",
                "row": err.row,
                "detail": err.reason,
            })

        workers = max(1, args.workers)
        try:
            if workers == 1:
                results_iter = map(process, pending)
                for item in results_iter:
                    _write_result(item, out_fh, log_fh, write_skip)
                    if item[0] == "ok":
                        written += 1
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    for item in pool.map(process, pending):
                        _write_result(item, out_fh, log_fh, write_skip)
                        if item[0] == "ok":
                            written += 1
        except BudgetExceeded:
            budget_hit = True
        except AuthError as exc:
            auth_error = exc
        fcntl.flock(out_fh.fileno(), fcntl.LOCK_UN)

    if auth_error is not None:
        _err(f"authentication failed: {auth_error}")
        return EXIT_CONFIG
    if budget_hit:
        _err(
            f"call budget exhausted after writing {written} records; "
            f"rerun with --resume to continue"
        )
        return EXIT_BUDGET

    if args.conversations:
        try:
            finished = read_jsonl(args.out)
        except SchemaError as exc:
            _err(f"cannot export conversations: {exc}")
            return EXIT_SCHEMA
        with open(args.conversations, "w", encoding="utf-8") as fh:
            for rec in finished:
                fh.write(json.dumps(to_conversation(rec), ensure_ascii=False,
                                    separators=(",", ":")) + "\n")

    print(f"generate: wrote {written} records to {args.out} ({skipped} skipped)")
    return EXIT_OK


def _write_result(item, out_fh, log_fh, write_skip) -> None:
    if item[0] == "ok":
        _, line, log_entry = item
        out_fh.write(line + "\n")
        out_fh.flush()
        log_fh.write(json.dumps(log_entry, ensure_ascii=False) + "\n")
        log_fh.flush()
    else:
        write_skip(item[1])


# --- evaluate ----------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else default_config()
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    vocab = AuVocabulary.default()
    llm = args.llm_normalize or cfg.eval.llm_normalize
    llm_annotator = None
    if llm:
        base_url = os.environ.get(ENV_BASE_URL) or cfg.annotator.base_url
        api_key = os.environ.get(ENV_API_KEY, "")
        if not base_url or not api_key:
            _err(
                f"--llm-normalize needs {ENV_BASE_URL} (or [annotator].base_url) "
                f"and {ENV_API_KEY}"
            )
            return EXIT_CONFIG
        llm_annotator = HttpAnnotator(
            base_url, api_key, cfg.annotator.model, vocab=vocab,
            timeout_s=cfg.annotator.timeout_s, retries=cfg.annotator.retries,
            backoff_base_s=cfg.annotator.backoff_base_s,
            rate_limit_per_s=cfg.annotator.rate_limit_per_s,
        )
    try:
        golds = [(r.record_id, r.labels) for r in read_jsonl(args.gold)]
        preds = read_predictions(args.pred, vocab, llm_annotator=llm_annotator)
    except SchemaError as exc:
        _err(f"schema error: {exc}")
        return EXIT_SCHEMA
    except OSError as exc:
        _err(f"cannot read inputs: {exc}")
        return EXIT_CONFIG
    try:
        report = score(preds, golds, vocab, va_tolerance=cfg.eval.va_tolerance)
    except AlignmentError as exc:
        _err(f"alignment error: {exc}")
        return EXIT_ALIGNMENT
    json_path, csv_path = write_report(report, args.report)
    print(
        f"evaluate: acc {report.expression_accuracy:.4f}, "
        f"macro AU F1 {report.au_f1_macro:.4f}, "
        f"valence MAE {report.valence_mae:.4f}, "
        f"arousal MAE {report.arousal_mae:.4f} "
        f"({report.n_scored} scored, {report.n_unparseable} unparseable)"
    )
    print(f"evaluate: wrote {json_path} and {csv_path}")
    return EXIT_OK


# --- simulate ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    results = run_grid(cfg.sim)
    write_grid_csv(results, args.out)
    print(f"simulate: wrote {len(results)} rows to {args.out}")
    return EXIT_OK


# --- inspect -----------------------------------------------------------------------


def cmd_inspect(args) -> int:
    try:
        records = read_jsonl(args.infile)
    except SchemaError as exc:
        _err(f"schema error: {exc}")
        return EXIT_SCHEMA
    except OSError as exc:
        _err(f"cannot read input: {exc}")
        return EXIT_CONFIG

    print(f"records: {len(records)}")
    task_names = {TaskKind.EXPRESSION: "expression", TaskKind.VALENCE_AROUSAL: "va",
                  TaskKind.ACTION_UNITS: "aus"}
    for task, name in task_names.items():
        manual = sum(1 for r in records if r.labels.get(task)[1].origin is Origin.MANUAL)
        print(f"{name}: manual {manual}, generated {len(records) - manual}")
    histogram = {c.value: 0 for c in ExpressionLabel}
    for r in records:
        histogram[r.labels.expression[0].value] += 1
    print("expression histogram: " + ", ".join(f"{k} {v}" for k, v in histogram.items()))
    au_ids = sorted({a for r in records for a in r.labels.aus[0].occurrences})
    rates = []
    for au in au_ids:
        on = sum(1 for r in records if r.labels.aus[0].occurrences.get(au, False))
        rates.append(f"AU{au} {on / len(records):.3f}")
    print("au positive rates: " + (", ".join(rates) if rates else "none"))
    if records:
        mean_v = sum(r.labels.va[0].valence for r in records) / len(records)
        mean_a = sum(r.labels.va[0].arousal for r in records) / len(records)
    else:
        mean_v = mean_a = 0.0
    print(f"valence mean: {mean_v:.4f}, arousal mean: {mean_a:.4f}")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seke",
        description="Complete missing facial-emotion annotations with an "
        "uncertainty-aware sampling loop and build instruction data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="complete a manifest into instruction records")
    g.add_argument("--manifest", required=True, help="input CSV manifest")
    g.add_argument("--config", required=True, help="TOML run configuration")
    g.add_argument("--out", required=True, help="output records JSONL")
    g.add_argument("--backend", choices=("http", "synthetic"), default="http")
    g.add_argument("--workers", type=int, default=4)
    g.add_argument("--resume", action="store_true",
                   help="skip record ids already present in the output")
    g.add_argument("--conversations", default=None,
                   help="also export a conversation-style JSONL view")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score predictions against gold records")
    e.add_argument("--pred", required=True)
    e.add_argument("--gold", required=True)
    e.add_argument("--report", required=True, help="output report directory")
    e.add_argument("--llm-normalize", action="store_true")
    e.add_argument("--config", default=None)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="run the synthetic reliability grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("inspect", help="summarize a records file")
    i.add_argument("--in", dest="infile", required=True)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

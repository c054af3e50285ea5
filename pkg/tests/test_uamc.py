"""Sampling loop: uncertainty estimators, acceptance draws, stop reasons,
and label finalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seke.affect import (
    TASK_ORDER,
    AuAnnotation,
    AuVocabulary,
    ExpressionLabel,
    Origin,
    PartialAnnotation,
    TaskKind,
)
from seke.annotator import (
    AnnotatorResponse,
    SyntheticAnnotator,
    SyntheticAnnotatorSpec,
    render_annotation,
    synthetic_complete,
)
from seke.prompts import build_prior_prompt
from seke import uamc
from seke.uamc import (
    AnnotatorExhausted,
    DomainError,
    InsufficientSamples,
    SampleSet,
    StopReason,
    SummaryParseError,
    TaskUncertainty,
    acceptance_probability,
    derive_record_seed,
    finalize_labels,
    normalize_uncertainty,
    population_variance,
    run_uamc,
    select_max,
    task_uncertainties,
    task_variance,
)

from helpers import (
    GENERATED,
    complete_annotation,
    make_record,
    oracle_gini,
    oracle_scalar_variance,
    random_truth,
    restrict,
)

VOCAB = AuVocabulary.default()
EXPR = TaskKind.EXPRESSION
VA = TaskKind.VALENCE_AROUSAL
AUS = TaskKind.ACTION_UNITS


def _va_samples(pairs):
    rounds = tuple(
        restrict(complete_annotation(valence=v, arousal=a, prov=GENERATED), {VA})
        for v, a in pairs
    )
    return SampleSet("r", rounds)


def _expr_samples(labels):
    rounds = tuple(
        restrict(complete_annotation(expression=c, prov=GENERATED), {EXPR})
        for c in labels
    )
    return SampleSet("r", rounds)


def _au_samples(active_sets, vocab=VOCAB):
    rounds = tuple(
        PartialAnnotation(aus=(AuAnnotation.dense(vocab, act), GENERATED))
        for act in active_sets
    )
    return SampleSet("r", rounds)


# --- variance and normalization --------------------------------------------------------


def test_population_variance_examples():
    assert population_variance([-1.0, 1.0]) == 1.0
    assert population_variance([0.3, 0.3, 0.3]) == pytest.approx(0.0, abs=1e-15)
    assert population_variance([0.2, 0.4, 0.6]) == pytest.approx(2.0 / 75.0, abs=1e-15)


def test_population_variance_needs_two():
    with pytest.raises(InsufficientSamples):
        population_variance([0.5])


def test_va_variance_combines_by_max():
    samples = _va_samples([(-1.0, 0.0), (1.0, 0.0)])
    assert task_variance(samples, VA) == 1.0
    samples = _va_samples([(0.0, -1.0), (0.0, 1.0)])
    assert task_variance(samples, VA) == 1.0


def test_expression_variance_is_gini():
    samples = _expr_samples([ExpressionLabel.HAPPINESS, ExpressionLabel.SADNESS])
    assert task_variance(samples, EXPR) == pytest.approx(0.5, abs=1e-15)
    samples = _expr_samples([ExpressionLabel.FEAR] * 3)
    assert task_variance(samples, EXPR) == pytest.approx(0.0, abs=1e-15)


def test_au_variance_mean_and_max():
    # Two rounds disagreeing on exactly one of 17 units.
    samples = _au_samples([{6}, set()])
    assert task_variance(samples, AUS) == pytest.approx(0.25 / 17, abs=1e-15)
    assert task_variance(samples, AUS, au_aggregate="max") == pytest.approx(0.25, abs=1e-15)


def test_au_variance_rejects_unknown_aggregate():
    with pytest.raises(DomainError):
        task_variance(_au_samples([{6}, set()]), AUS, au_aggregate="median")


def test_task_variance_needs_two_rounds():
    with pytest.raises(InsufficientSamples):
        task_variance(_va_samples([(0.0, 0.0)]), VA)


def test_normalize_uncertainty_peaks():
    assert normalize_uncertainty(1.0 - 1.0 / 8.0, EXPR) == 1.0
    assert normalize_uncertainty(0.25 / 17, AUS) == pytest.approx(1.0 / 17, abs=1e-15)
    assert normalize_uncertainty(0.25, AUS) == 1.0
    assert normalize_uncertainty(0.7, VA) == 0.7
    assert normalize_uncertainty(2.0, VA) == 1.0
    assert normalize_uncertainty(-0.0, EXPR) == 0.0


def test_acceptance_probability_examples():
    assert acceptance_probability(0.0) == 0.5
    assert acceptance_probability(1.0) == 1.0
    assert acceptance_probability(0.4) == 0.7


def test_acceptance_probability_domain():
    for bad in (-0.1, 1.0000001, 2.0):
        with pytest.raises(DomainError):
            acceptance_probability(bad)


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_acceptance_probability_is_affine(u):
    assert acceptance_probability(u) == 0.5 + 0.5 * u


# --- estimator versus brute-force oracles ----------------------------------------------


@settings(max_examples=150, deadline=None)
@given(
    pairs=st.lists(
        st.tuples(
            st.floats(min_value=-1, max_value=1, allow_nan=False),
            st.floats(min_value=-1, max_value=1, allow_nan=False),
        ),
        min_size=2,
        max_size=8,
    )
)
def test_va_variance_matches_oracle(pairs):
    got = task_variance(_va_samples(pairs), VA)
    expected = max(
        oracle_scalar_variance([v for v, _ in pairs]),
        oracle_scalar_variance([a for _, a in pairs]),
    )
    assert got == pytest.approx(expected, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(votes=st.lists(st.sampled_from(tuple(ExpressionLabel)), min_size=2, max_size=8))
def test_expression_variance_matches_gini_oracle(votes):
    got = task_variance(_expr_samples(votes), EXPR)
    assert got == pytest.approx(oracle_gini(votes), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(
    active_sets=st.lists(
        st.sets(st.sampled_from(VOCAB.au_ids)), min_size=2, max_size=6
    )
)
def test_au_variance_matches_bernoulli_oracle(active_sets):
    samples = _au_samples(active_sets)
    per_au = [
        oracle_scalar_variance([1.0 if a in act else 0.0 for act in active_sets])
        for a in VOCAB
    ]
    assert task_variance(samples, AUS) == pytest.approx(
        sum(per_au) / len(per_au), abs=1e-12
    )
    assert task_variance(samples, AUS, au_aggregate="max") == pytest.approx(
        max(per_au), abs=1e-12
    )


def test_task_uncertainties_orders_and_normalizes():
    rounds = tuple(
        restrict(
            complete_annotation(expression=c, valence=v, arousal=0.0, prov=GENERATED),
            {EXPR, VA},
        )
        for c, v in [
            (ExpressionLabel.HAPPINESS, -1.0),
            (ExpressionLabel.SADNESS, 1.0),
        ]
    )
    stats = task_uncertainties(
        SampleSet("r", rounds), {VA, EXPR}, VOCAB, round_index=2
    )
    assert [s.task for s in stats] == [EXPR, VA]
    assert stats[0].normalized == pytest.approx(0.5 / 0.875, abs=1e-15)
    assert stats[1].normalized == 1.0
    assert all(s.round == 2 for s in stats)
    assert select_max(stats).task is VA


def test_select_max_prefers_earlier_task_on_ties():
    stats = [
        TaskUncertainty(task=EXPR, raw=0.1, normalized=0.4, round=2),
        TaskUncertainty(task=AUS, raw=0.1, normalized=0.4, round=2),
    ]
    assert select_max(stats).task is EXPR
    with pytest.raises(DomainError):
        select_max([])


@given(
    values=st.lists(
        st.floats(min_value=1e-6, max_value=1.0, allow_nan=False), min_size=1, max_size=3
    ),
    scale=st.floats(min_value=0.1, max_value=1.0, allow_nan=False),
)
def test_select_max_scale_invariant(values, scale):
    tasks = TASK_ORDER[: len(values)]
    stats = [
        TaskUncertainty(task=t, raw=v, normalized=v, round=2)
        for t, v in zip(tasks, values)
    ]
    scaled = [
        TaskUncertainty(task=t, raw=v, normalized=v * scale, round=2)
        for t, v in zip(tasks, values)
    ]
    assert select_max(stats).task is select_max(scaled).task


# --- seeds ------------------------------------------------------------------------------


def test_derive_record_seed_is_stable_and_spread():
    assert derive_record_seed(42, "r1") == derive_record_seed(42, "r1")
    assert derive_record_seed(42, "r1") != derive_record_seed(42, "r2")
    assert derive_record_seed(42, "r1") != derive_record_seed(43, "r1")
    assert 0 <= derive_record_seed(0, "") < 2 ** 64


# --- the sampling loop ------------------------------------------------------------------


def _loop_setup(noise=0.0, va_sigma=0.0, present=(EXPR,), seed=101, rid="r1"):
    truth = random_truth(np.random.default_rng(derive_record_seed(seed, rid + "/t")))
    record = make_record(record_id=rid, annotation=restrict(truth, present))
    spec = SyntheticAnnotatorSpec(truth, noise=noise, va_sigma=va_sigma)
    annotator = SyntheticAnnotator(spec)
    targets = record.annotation.missing()
    prompt = build_prior_prompt(record, targets, VOCAB)
    return record, annotator, prompt


def test_run_uamc_complete_record_short_circuits():
    record = make_record()
    result = run_uamc(record, None, None, VOCAB, seed=5)
    assert result.final_s == 0
    assert result.stop_reason is StopReason.NO_MISSING_TASKS
    assert result.trajectory == ()
    assert result.samples.rounds == ()


def test_run_uamc_rejects_small_budget():
    with pytest.raises(DomainError):
        run_uamc(make_record(annotation=PartialAnnotation()), None, None, VOCAB,
                 seed=1, max_samples=1)


def test_run_uamc_zero_noise_stops_at_two_often():
    lengths = []
    for i in range(300):
        record, annotator, prompt = _loop_setup(rid=f"r{i}")
        result = run_uamc(record, annotator, prompt, VOCAB, seed=derive_record_seed(3, f"r{i}"))
        assert result.final_s == len(result.samples.rounds)
        assert len(result.trajectory) == result.final_s - 1
        assert result.samples.failed_rounds == 0
        assert annotator.calls == result.final_s
        # Identical rounds leave at most squared-ulp residue in the variance.
        assert all(t.normalized <= 1e-12 for t in result.trajectory)
        assert result.stop_reason in (StopReason.LOW_UNCERTAINTY_DRAW, StopReason.BUDGET)
        lengths.append(result.final_s)
    mean = sum(lengths) / len(lengths)
    assert 2.875 - 0.2 <= mean <= 2.875 + 0.2
    assert min(lengths) == 2


def test_run_uamc_zero_noise_continue_rate_is_half():
    continued = 0
    n = 3000
    for i in range(n):
        record, annotator, prompt = _loop_setup(rid=f"c{i}")
        result = run_uamc(record, annotator, prompt, VOCAB, seed=derive_record_seed(9, f"c{i}"))
        continued += result.final_s >= 3
    assert 0.5 - 0.03 <= continued / n <= 0.5 + 0.03


def test_run_uamc_trajectory_tracks_rounds_under_noise():
    for i in range(200):
        record, annotator, prompt = _loop_setup(
            noise=0.3, va_sigma=0.2, present=(), rid=f"n{i}"
        )
        result = run_uamc(record, annotator, prompt, VOCAB, seed=derive_record_seed(4, f"n{i}"))
        assert 2 <= result.final_s <= 5
        assert len(result.trajectory) == result.final_s - 1
        assert [t.round for t in result.trajectory] == list(range(2, result.final_s + 1))
        for t in result.trajectory:
            assert 0.0 <= t.normalized <= 1.0
        if result.final_s == 5:
            assert result.stop_reason is StopReason.BUDGET
        else:
            assert result.stop_reason is StopReason.LOW_UNCERTAINTY_DRAW


def test_run_uamc_is_deterministic():
    record, _, prompt = _loop_setup(noise=0.4, va_sigma=0.3, present=())
    spec = SyntheticAnnotatorSpec(
        random_truth(np.random.default_rng(derive_record_seed(101, "r1/t"))),
        noise=0.4, va_sigma=0.3,
    )
    results = [
        run_uamc(record, SyntheticAnnotator(spec), prompt, VOCAB, seed=77)
        for _ in range(2)
    ]
    assert results[0] == results[1]


def test_run_uamc_forced_max_uncertainty_exhausts_budget(monkeypatch):
    monkeypatch.setattr(uamc, "normalize_uncertainty", lambda raw, task, vocab=None, **kw: 1.0)
    for i in range(20):
        record, annotator, prompt = _loop_setup(rid=f"f{i}")
        result = run_uamc(record, annotator, prompt, VOCAB, seed=derive_record_seed(8, f"f{i}"))
        assert result.final_s == 5
        assert result.stop_reason is StopReason.BUDGET


class FlakyAnnotator:
    """Parses fine except for rounds listed in ``bad_rounds``, which fail
    every re-ask."""

    def __init__(self, spec, bad_rounds):
        self.inner = SyntheticAnnotator(spec)
        self.bad_rounds = set(bad_rounds)
        self.calls = 0

    def complete(self, prompt, image_ref, params, rng=None):
        self.calls += 1
        response = self.inner.complete(prompt, image_ref, params, rng=rng)
        if params.round_index in self.bad_rounds:
            return AnnotatorResponse(
                raw_text="sorry, no JSON this time",
                parsed=None,
                analysis_text=None,
                latency_ms=0,
                attempt=response.attempt,
            )
        return response


def test_run_uamc_failed_round_consumes_budget_without_sampling(monkeypatch):
    monkeypatch.setattr(uamc, "acceptance_probability", lambda u: 1.0)
    truth = random_truth(np.random.default_rng(0))
    record = make_record(annotation=restrict(truth, {EXPR}))
    spec = SyntheticAnnotatorSpec(truth)
    annotator = FlakyAnnotator(spec, bad_rounds={3})
    prompt = build_prior_prompt(record, record.annotation.missing(), VOCAB)
    result = run_uamc(record, annotator, prompt, VOCAB, seed=1, max_samples=4,
                      parse_retries=1)
    assert result.final_s == 3
    assert result.samples.failed_rounds == 1
    assert len(result.trajectory) == result.final_s - 1
    assert result.stop_reason is StopReason.BUDGET
    # Round 3 was asked twice (initial ask plus one re-ask), all others once.
    assert annotator.calls == 5


def test_run_uamc_initial_round_failure_raises():
    truth = random_truth(np.random.default_rng(1))
    record = make_record(annotation=restrict(truth, {EXPR}))
    annotator = FlakyAnnotator(SyntheticAnnotatorSpec(truth), bad_rounds={1})
    prompt = build_prior_prompt(record, record.annotation.missing(), VOCAB)
    with pytest.raises(AnnotatorExhausted) as err:
        run_uamc(record, annotator, prompt, VOCAB, seed=2, parse_retries=2)
    assert err.value.record_id == "r1"
    assert err.value.round_index == 1
    assert annotator.calls == 3


def test_run_uamc_second_round_failure_raises():
    truth = random_truth(np.random.default_rng(2))
    record = make_record(annotation=restrict(truth, {VA}))
    annotator = FlakyAnnotator(SyntheticAnnotatorSpec(truth), bad_rounds={2})
    prompt = build_prior_prompt(record, record.annotation.missing(), VOCAB)
    with pytest.raises(AnnotatorExhausted) as err:
        run_uamc(record, annotator, prompt, VOCAB, seed=3)
    assert err.value.round_index == 2


def test_run_uamc_reask_appends_format_reminder():
    seen_users = []

    class Recorder:
        def __init__(self, spec):
            self.inner = SyntheticAnnotator(spec)

        def complete(self, prompt, image_ref, params, rng=None):
            seen_users.append(prompt.user)
            response = self.inner.complete(prompt, image_ref, params, rng=rng)
            if len(seen_users) == 1:
                return AnnotatorResponse("nope", None, None, 0, 1)
            return response

    truth = random_truth(np.random.default_rng(3))
    record = make_record(annotation=restrict(truth, {AUS}))
    prompt = build_prior_prompt(record, record.annotation.missing(), VOCAB)
    run_uamc(record, Recorder(SyntheticAnnotatorSpec(truth)), prompt, VOCAB, seed=4)
    assert seen_users[0] == prompt.user
    assert seen_users[1].startswith(prompt.user)
    assert "could not be parsed" in seen_users[1]


def test_run_uamc_callable_prompt_gets_round_index():
    rounds_seen = []

    def prompt_for(round_index):
        rounds_seen.append(round_index)
        return build_prior_prompt(record, record.annotation.missing(), VOCAB,
                                  variant=round_index - 1)

    truth = random_truth(np.random.default_rng(4))
    record = make_record(annotation=restrict(truth, {EXPR}))
    run_uamc(record, SyntheticAnnotator(SyntheticAnnotatorSpec(truth)), prompt_for,
             VOCAB, seed=6)
    assert rounds_seen[:2] == [1, 2]


# --- finalization -----------------------------------------------------------------------


def _summary_response(truth, noise=0.0, seed=0):
    spec = SyntheticAnnotatorSpec(truth, noise=noise)
    return synthetic_complete(
        spec, TASK_ORDER, np.random.default_rng(seed), analysis=True
    )


def test_finalize_manual_labels_win():
    rng = np.random.default_rng(10)
    truth = random_truth(rng)
    record = make_record(annotation=restrict(truth, {EXPR, VA}))
    conflicting = random_truth(rng)
    response = _summary_response(conflicting)
    final = finalize_labels(record, response, VOCAB, run_id="run-9")
    assert final.expression == record.annotation.expression
    assert final.va == record.annotation.va
    assert final.aus is not None
    assert final.aus[1].origin is Origin.GENERATED
    assert final.aus[1].generator_run_id == "run-9"
    assert final.aus[0] == response.parsed.aus[0]


def test_finalize_fills_everything_when_record_is_empty():
    truth = random_truth(np.random.default_rng(11))
    record = make_record(annotation=PartialAnnotation())
    response = _summary_response(truth)
    final = finalize_labels(record, response, VOCAB, run_id="x")
    assert final.is_complete()
    for task in TASK_ORDER:
        assert final.get(task)[1].origin is Origin.GENERATED
        assert final.value(task) == truth.value(task)


def test_finalize_rejects_summary_without_analysis():
    truth = random_truth(np.random.default_rng(12))
    raw = render_annotation(truth, TASK_ORDER, VOCAB)
    parsed = PartialAnnotation(
        expression=truth.expression, va=truth.va, aus=truth.aus
    )
    response = AnnotatorResponse(raw, parsed, None, 0, 1)
    with pytest.raises(SummaryParseError) as err:
        finalize_labels(make_record(annotation=PartialAnnotation()), response, VOCAB,
                        run_id="x")
    assert err.value.code == "bad_schema"


def test_finalize_propagates_parse_code():
    response = AnnotatorResponse("no json at all", None, None, 0, 1)
    with pytest.raises(SummaryParseError) as err:
        finalize_labels(make_record(annotation=PartialAnnotation()), response, VOCAB,
                        run_id="x")
    assert err.value.code == "no_json"

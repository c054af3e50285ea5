"""Chat-annotator client: structured parsing, a synthetic oracle backend,
and an HTTP backend speaking the chat-completions wire format.

Every ``complete`` call produces exactly one model completion.  Transport
retries happen inside the call and never duplicate a successful completion;
format re-asks after a parse failure are separate calls issued by the
sampling layer.
"""

from __future__ import annotations

import base64
import json
import re
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import requests

from .affect import (
    EXPRESSION_CATEGORIES,
    AuAnnotation,
    AuVocabulary,
    ExpressionLabel,
    Origin,
    PartialAnnotation,
    Provenance,
    TaskKind,
    VaAnnotation,
)
from .prompts import PromptText, response_keys, schema_tasks


class AnnotatorError(Exception):
    pass


class TransportError(AnnotatorError):
    """Network-level failure after retries were exhausted (retryable class)."""


class AuthError(AnnotatorError):
    """Credential rejection; never retried."""


class BudgetExceeded(AnnotatorError):
    """The configured completion-call budget ran out; never retried."""


class ParseError(AnnotatorError):
    """A reply violates the requested response schema.

    ``code`` is one of ``no_json``, ``bad_schema``, ``range``, ``vocabulary``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 1.0
    max_output_tokens: int = 768
    round_index: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature out of [0, 2]: {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if self.round_index < 1:
            raise ValueError("round_index starts at 1")


@dataclass(frozen=True)
class AnnotatorResponse:
    """One completion.  ``parsed`` is set iff schema parsing succeeded."""

    raw_text: str
    parsed: Optional[PartialAnnotation]
    analysis_text: Optional[str]
    latency_ms: int
    attempt: int


# --- structured output parsing -------------------------------------------------

_FENCE = re.compile(r"```(?:[A-Za-z]+)?\s*(.*?)```", re.DOTALL)

_CATEGORY_BY_NAME = {c: ExpressionLabel(c) for c in EXPRESSION_CATEGORIES}


def _requested_keys(requested: Iterable[TaskKind], require_analysis: bool) -> set[str]:
    return set(response_keys(requested, analysis=require_analysis))


def parse_structured(
    raw_text: str,
    requested: Iterable[TaskKind],
    vocab: AuVocabulary,
    *,
    require_analysis: bool = False,
) -> tuple[PartialAnnotation, Optional[str]]:
    """Parse the first fenced JSON block of a reply against the request.

    The reply must contain exactly the keys for ``requested`` (plus
    ``analysis`` when required).  Values are validated, never repaired:
    out-of-range valence/arousal raises ``ParseError('range')`` and unknown
    action-unit ids raise ``ParseError('vocabulary')``.  AU maps may be
    sparse in the reply; ids absent from the map are recorded as inactive.
    """
    requested = frozenset(requested)
    match = _FENCE.search(raw_text)
    if match is None:
        raise ParseError("no_json", "no fenced JSON block found")
    try:
        obj = json.loads(match.group(1).strip())
    except json.JSONDecodeError as exc:
        raise ParseError("no_json", f"fenced block is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("bad_schema", "top-level JSON value must be an object")

    expected = _requested_keys(requested, require_analysis)
    got = set(obj)
    if got != expected:
        extra, missing = sorted(got - expected), sorted(expected - got)
        raise ParseError(
            "bad_schema",
            f"keys mismatch: unexpected {extra or '[]'}, missing {missing or '[]'}",
        )

    prov = Provenance(Origin.GENERATED)
    expression = va = aus = None

    if TaskKind.EXPRESSION in requested:
        value = obj["expression"]
        if not isinstance(value, str):
            raise ParseError("bad_schema", "expression must be a string")
        label = _CATEGORY_BY_NAME.get(value.strip().lower())
        if label is None:
            raise ParseError("bad_schema", f"unknown expression category: {value!r}")
        expression = (label, prov)

    if TaskKind.VALENCE_AROUSAL in requested:
        pair = []
        for key in ("valence", "arousal"):
            value = obj[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ParseError("bad_schema", f"{key} must be a number")
            if not -1.0 <= value <= 1.0:
                raise ParseError("range", f"{key} out of [-1, 1]: {value}")
            pair.append(float(value))
        va = (VaAnnotation(pair[0], pair[1]), prov)

    if TaskKind.ACTION_UNITS in requested:
        value = obj["aus"]
        if not isinstance(value, dict):
            raise ParseError("bad_schema", "aus must be an object")
        stated: dict[int, bool] = {}
        for key, bit in value.items():
            try:
                au = int(key)
            except (TypeError, ValueError):
                raise ParseError("vocabulary", f"au id is not an integer: {key!r}") from None
            if au not in vocab:
                raise ParseError("vocabulary", f"au id not in vocabulary: {au}")
            if isinstance(bit, bool):
                stated[au] = bit
            elif isinstance(bit, int) and bit in (0, 1):
                stated[au] = bool(bit)
            else:
                raise ParseError("bad_schema", f"au {au} value must be true/false or 0/1")
        aus = (AuAnnotation({a: stated.get(a, False) for a in vocab}), prov)

    analysis = None
    if require_analysis:
        value = obj["analysis"]
        if not isinstance(value, str) or not value.strip():
            raise ParseError("bad_schema", "analysis must be a nonempty string")
        analysis = value

    return PartialAnnotation(expression=expression, va=va, aus=aus), analysis


def render_annotation(
    annotation: PartialAnnotation,
    requested: Iterable[TaskKind],
    vocab: AuVocabulary,
    *,
    analysis: Optional[str] = None,
) -> str:
    """Render ``annotation`` as the fenced JSON reply ``parse_structured``
    expects; the inverse of parsing for the requested tasks."""
    requested = frozenset(requested)
    obj: dict = {}
    if TaskKind.EXPRESSION in requested:
        obj["expression"] = annotation.expression[0].value
    if TaskKind.VALENCE_AROUSAL in requested:
        va = annotation.va[0]
        obj["valence"] = float(va.valence)
        obj["arousal"] = float(va.arousal)
    if TaskKind.ACTION_UNITS in requested:
        occ = annotation.aus[0].occurrences
        obj["aus"] = {str(a): bool(occ.get(a, False)) for a in vocab}
    if analysis is not None:
        obj["analysis"] = analysis
    return "```json\n" + json.dumps(obj, ensure_ascii=False) + "\n```"


# --- call accounting -----------------------------------------------------------


class CallBudget:
    """Thread-safe completion-call counter shared across workers."""

    def __init__(self, max_calls: int):
        if max_calls < 1:
            raise ValueError("max_calls must be positive")
        self.max_calls = max_calls
        self._used = 0
        self._lock = threading.Lock()

    def charge(self) -> None:
        with self._lock:
            if self._used >= self.max_calls:
                raise BudgetExceeded(f"call budget of {self.max_calls} exhausted")
            self._used += 1

    @property
    def used(self) -> int:
        with self._lock:
            return self._used


class RateLimiter:
    """Token-bucket limiter; a nonpositive rate disables it."""

    def __init__(self, rate_per_s: float, burst: float = 1.0):
        self.rate = float(rate_per_s)
        self.burst = max(1.0, float(burst))
        self._tokens = self.burst
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate <= 0:
            return
        with self._lock:
            now = time.monotonic()
            self._tokens = min(self.burst, self._tokens + (now - self._stamp) * self.rate)
            self._stamp = now
            if self._tokens < 1.0:
                wait = (1.0 - self._tokens) / self.rate
                time.sleep(wait)
                self._stamp = time.monotonic()
                self._tokens = 1.0
            self._tokens -= 1.0


# --- synthetic oracle backend ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticAnnotatorSpec:
    """A noisy oracle around a complete hidden ground truth.

    ``noise`` flips the expression to a uniformly random other category and
    flips each action unit independently, each with the given probability;
    ``va_sigma`` adds clipped Gaussian noise to valence and arousal.
    """

    hidden_truth: PartialAnnotation
    noise: float = 0.0
    va_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not self.hidden_truth.is_complete():
            raise ValueError("hidden_truth must label all three tasks")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise out of [0, 1]: {self.noise}")
        if self.va_sigma < 0.0:
            raise ValueError(f"va_sigma must be nonnegative: {self.va_sigma}")


def _truth_vocab(spec: SyntheticAnnotatorSpec) -> AuVocabulary:
    return AuVocabulary(tuple(sorted(spec.hidden_truth.aus[0].occurrences)))


def synthetic_complete(
    spec: SyntheticAnnotatorSpec,
    requested: Iterable[TaskKind],
    rng: np.random.Generator,
    *,
    analysis: bool = False,
    attempt: int = 1,
) -> AnnotatorResponse:
    """One noisy completion for the requested tasks, rendered through the
    same fenced-JSON format the parser consumes.

    Draw order is fixed (expression, then valence-arousal, then each action
    unit in vocabulary order), so replay under an equally seeded generator
    is exact.
    """
    requested = frozenset(requested)
    vocab = _truth_vocab(spec)
    prov = Provenance(Origin.GENERATED)
    truth = spec.hidden_truth

    expression = va = aus = None
    if TaskKind.EXPRESSION in requested:
        label = truth.expression[0]
        if spec.noise > 0 and rng.random() < spec.noise:
            others = [c for c in ExpressionLabel if c is not label]
            label = others[int(rng.integers(len(others)))]
        expression = (label, prov)
    if TaskKind.VALENCE_AROUSAL in requested:
        base = truth.va[0]
        dv = rng.normal(0.0, spec.va_sigma)
        da = rng.normal(0.0, spec.va_sigma)
        va = (
            VaAnnotation(
                float(np.clip(base.valence + dv, -1.0, 1.0)),
                float(np.clip(base.arousal + da, -1.0, 1.0)),
            ),
            prov,
        )
    if TaskKind.ACTION_UNITS in requested:
        occ_truth = truth.aus[0].occurrences
        occ: dict[int, bool] = {}
        for au in vocab:
            flip = spec.noise > 0 and rng.random() < spec.noise
            occ[au] = bool(occ_truth[au]) ^ flip
        aus = (AuAnnotation(occ), prov)

    noisy = PartialAnnotation(expression=expression, va=va, aus=aus)
    analysis_text = None
    if analysis:
        active = ", ".join(f"AU{a}" for a in noisy.aus[0].active()) or "no action units"
        analysis_text = (
            f"The face reads as {noisy.expression[0].value} with valence "
            f"{noisy.va[0].valence:.2f} and arousal {noisy.va[0].arousal:.2f}; "
            f"{active} active, which is consistent with that reading."
        )
    raw = render_annotation(noisy, requested, vocab, analysis=analysis_text)
    parsed, parsed_analysis = parse_structured(
        raw, requested, vocab, require_analysis=analysis
    )
    return AnnotatorResponse(
        raw_text=raw,
        parsed=parsed,
        analysis_text=parsed_analysis,
        latency_ms=0,
        attempt=attempt,
    )


class SyntheticAnnotator:
    """Offline backend bound to one record's hidden truth."""

    def __init__(
        self,
        spec: SyntheticAnnotatorSpec,
        budget: Optional[CallBudget] = None,
    ):
        self.spec = spec
        self.budget = budget
        self.calls = 0

    def complete(
        self,
        prompt: PromptText,
        image_ref: str,
        params: DecodingParams,
        rng: Optional[np.random.Generator] = None,
    ) -> AnnotatorResponse:
        if rng is None:
            raise ValueError("the synthetic backend needs an explicit rng")
        if self.budget is not None:
            self.budget.charge()
        self.calls += 1
        requested, needs_analysis = schema_tasks(prompt.response_schema_id)
        return synthetic_complete(
            self.spec, requested, rng, analysis=needs_analysis, attempt=1
        )


# --- HTTP backend ---------------------------------------------------------------

_MIME_BY_SUFFIX = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".webp": "image/webp",
    ".gif": "image/gif",
}

_RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


def image_data_uri(image_ref: str) -> str:
    suffix = image_ref[image_ref.rfind("."):].lower() if "." in image_ref else ""
    mime = _MIME_BY_SUFFIX.get(suffix, "image/jpeg")
    with open(image_ref, "rb") as fh:
        payload = base64.b64encode(fh.read()).decode("ascii")
    return f"data:{mime};base64,{payload}"


def build_request_body(
    model: str, prompt: PromptText, image_ref: str, params: DecodingParams
) -> dict:
    """Pure function from (prompt, image, params) to the wire payload."""
    content: list[dict] = [{"type": "text", "text": prompt.user}]
    if prompt.image_attached:
        content.append({"type": "image_url", "image_url": {"url": image_data_uri(image_ref)}})
    messages = []
    if prompt.system:
        messages.append({"role": "system", "content": prompt.system})
    messages.append({"role": "user", "content": content})
    return {
        "model": model,
        "messages": messages,
        "temperature": params.temperature,
        "max_tokens": params.max_output_tokens,
    }


class HttpAnnotator:
    """Chat-completions client with backoff retries and rate limiting."""

    def __init__(
        self,
        base_url: str,
        api_key: str,
        model: str,
        *,
        vocab: AuVocabulary,
        budget: Optional[CallBudget] = None,
        timeout_s: float = 60.0,
        retries: int = 5,
        backoff_base_s: float = 0.5,
        rate_limit_per_s: float = 0.0,
        session=None,
        sleep=time.sleep,
    ):
        if not base_url:
            raise ValueError("base_url must be set")
        if not api_key:
            raise AuthError("no API key configured")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.vocab = vocab
        self.budget = budget
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_base_s = backoff_base_s
        self.limiter = RateLimiter(rate_limit_per_s)
        self.session = session if session is not None else requests.Session()
        self._sleep = sleep
        self._headers = {
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json",
        }

    def complete(
        self,
        prompt: PromptText,
        image_ref: str,
        params: DecodingParams,
        rng: Optional[np.random.Generator] = None,
    ) -> AnnotatorResponse:
        body = build_request_body(self.model, prompt, image_ref, params)
        last_error: Optional[str] = None
        for attempt in range(1, self.retries + 2):
            if self.budget is not None:
                self.budget.charge()
            self.limiter.acquire()
            started = time.monotonic()
            try:
                resp = self.session.post(
                    self.url, json=body, headers=self._headers, timeout=self.timeout_s
                )
                status = resp.status_code
            except requests.RequestException as exc:
                last_error = f"request failed: {exc}"
                status = None
            if status is not None:
                if status in (401, 403):
                    raise AuthError(f"credentials rejected (HTTP {status})")
                if status == 200:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        last_error = f"malformed completion payload: {exc}"
                    else:
                        latency = int((time.monotonic() - started) * 1000)
                        return self._to_response(prompt, content, latency, attempt)
                elif status in _RETRYABLE_STATUS:
                    last_error = f"HTTP {status}"
                else:
                    raise TransportError(f"unrecoverable HTTP {status}")
            if attempt <= self.retries:
                self._sleep(self.backoff_base_s * (2 ** (attempt - 1)))
        raise TransportError(f"gave up after {self.retries + 1} attempts: {last_error}")

    def _to_response(
        self, prompt: PromptText, content: str, latency_ms: int, attempt: int
    ) -> AnnotatorResponse:
        requested, needs_analysis = schema_tasks(prompt.response_schema_id)
        try:
            parsed, analysis = parse_structured(
                content, requested, self.vocab, require_analysis=needs_analysis
            )
        except ParseError:
            parsed, analysis = None, None
        return AnnotatorResponse(
            raw_text=content,
            parsed=parsed,
            analysis_text=analysis,
            latency_ms=latency_ms,
            attempt=attempt,
        )

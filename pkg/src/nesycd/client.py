"""Chat-completion wire client for teacher, student, and embedding services.

One client speaks to every role over the ubiquitous chat-completion JSON
protocol (messages array, ``temperature``, ``n``, ``logprobs``/``top_logprobs``)
plus its ``/embeddings`` sibling route. Log-probabilities are converted to
plain probabilities at this boundary, so downstream modules only ever see
values in [0, 1].

Error taxonomy:
  * TransportError  — network-level failure after the configured retries
  * RefusalError    — the service answered and said no (terminal)
  * ProtocolError   — the service answered with a malformed/incomplete body
"""

from __future__ import annotations

import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import requests

from .core import ErrorCase, KnowledgeEntry, ModelRole, PipelineConfig, QAExample, RationaleRecord
from .evaluation import exact_match, extract_answer
from .prompts import render_cot_prompt, render_knowledge_prompt

logger = logging.getLogger(__name__)


class TransportError(RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class RefusalError(RuntimeError):
    def __init__(self, status: int, message: str):
        super().__init__(f"service refused (HTTP {status}): {message}")
        self.status = status
        self.service_message = message


class ProtocolError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    """A per-item generation failure, carrying the example id it belongs to."""

    def __init__(self, example_id: str, cause: Exception):
        super().__init__(f"example {example_id}: {cause}")
        self.example_id = example_id
        self.cause = cause


@dataclass(frozen=True)
class GenerationRequest:
    role: ModelRole
    messages: Sequence[tuple[str, str]]
    temperature: float
    max_new_tokens: int
    num_return_sequences: int = 1
    want_logprobs: bool = False
    top_logprobs_k: int = 0

    def __post_init__(self):
        if self.num_return_sequences < 1:
            raise ValueError("num_return_sequences must be >= 1")
        if self.want_logprobs and self.top_logprobs_k < 2:
            raise ValueError("top_logprobs_k must be >= 2 when logprobs are requested")
        for speaker, _ in self.messages:
            if speaker not in ("system", "user", "assistant"):
                raise ValueError(f"unknown speaker {speaker!r}")


@dataclass(frozen=True)
class TokenAlternatives:
    """One generated token with its top-k alternatives as (token, probability)."""

    token: str
    top: tuple[tuple[str, float], ...]

    def __post_init__(self):
        probs = [p for _, p in self.top]
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ProtocolError(f"token {self.token!r}: probability outside [0, 1]: {probs}")
        if any(probs[i] < probs[i + 1] for i in range(len(probs) - 1)):
            raise ProtocolError(f"token {self.token!r}: alternatives not sorted descending")


@dataclass(frozen=True)
class GeneratedSequence:
    text: str
    tokens: tuple[TokenAlternatives, ...] | None = None


@dataclass(frozen=True)
class GenerationResponse:
    sequences: tuple[GeneratedSequence, ...]


def _probability_from_logprob(logprob: float) -> float:
    if logprob > 1e-9:
        raise ProtocolError(f"logprob {logprob} implies probability > 1")
    return min(1.0, math.exp(logprob))


class LlmClient:
    """Synchronous client with bounded per-endpoint concurrency and retries.

    Transport failures (connection errors, timeouts, 5xx) are retried with
    exponential backoff; refusals (4xx or an error body) are terminal —
    deterministic pipelines over silent repair.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config

    # -- wire level ----------------------------------------------------------

    def _post(self, role: ModelRole, route: str, payload: dict) -> dict:
        url = role.endpoint.rstrip("/") + route
        headers = {"Content-Type": "application/json"}
        key = role.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        attempts = self.config.request_retries
        last_error = "unknown transport failure"
        for attempt in range(1, attempts + 1):
            try:
                response = requests.post(
                    url, json=payload, headers=headers, timeout=self.config.request_timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}: {response.text[:200]}"
                elif response.status_code >= 400:
                    message = response.text
                    try:
                        message = response.json().get("error", {}).get("message", message)
                    except ValueError:
                        pass
                    raise RefusalError(response.status_code, message)
                else:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise ProtocolError(f"non-JSON response from {url}: {exc}") from exc
            if attempt < attempts:
                delay = self.config.retry_backoff * (2 ** (attempt - 1))
                logger.warning("retrying %s (attempt %d/%d): %s", url, attempt, attempts, last_error)
                time.sleep(delay)
        raise TransportError(f"cannot reach {url}: {last_error}", attempts)

    def complete(self, request: GenerationRequest) -> GenerationResponse:
        """Run one chat completion; returns exactly num_return_sequences sequences."""
        payload = {
            "model": request.role.model_name,
            "messages": [
                {"role": speaker, "content": text} for speaker, text in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
            "n": request.num_return_sequences,
        }
        if request.want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = request.top_logprobs_k
        body = self._post(request.role, "/chat/completions", payload)
        choices = body.get("choices")
        if not isinstance(choices, list):
            raise ProtocolError("response has no choices array")
        if len(choices) != request.num_return_sequences:
            raise ProtocolError(
                f"asked for {request.num_return_sequences} sequences, got {len(choices)}"
            )
        sequences = []
        for choice in choices:
            text = (choice.get("message") or {}).get("content")
            if text is None:
                raise ProtocolError("choice missing message.content")
            tokens = None
            if request.want_logprobs:
                content = (choice.get("logprobs") or {}).get("content")
                if content is None:
                    raise ProtocolError("logprobs requested but missing from response")
                tokens = tuple(self._parse_token_logprobs(entry) for entry in content)
            sequences.append(GeneratedSequence(text=text, tokens=tokens))
        return GenerationResponse(sequences=tuple(sequences))

    @staticmethod
    def _parse_token_logprobs(entry: dict) -> TokenAlternatives:
        alts = entry.get("top_logprobs") or []
        if len(alts) < 2:
            raise ProtocolError(
                f"token {entry.get('token')!r}: need >= 2 alternatives, got {len(alts)}"
            )
        top = sorted(
            ((alt["token"], _probability_from_logprob(alt["logprob"])) for alt in alts),
            key=lambda pair: -pair[1],
        )
        return TokenAlternatives(token=entry.get("token", ""), top=tuple(top))

    def embed(self, role: ModelRole, texts: Sequence[str]) -> list[list[float]]:
        """Embed a batch of texts; one fixed-dimension vector per input."""
        if not texts:
            return []
        if any(not text for text in texts):
            raise ValueError("cannot embed empty text")
        body = self._post(role, "/embeddings", {"model": role.model_name, "input": list(texts)})
        data = body.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            raise ProtocolError(f"expected {len(texts)} embeddings, got {data and len(data)}")
        vectors: list[list[float] | None] = [None] * len(texts)
        try:
            for item in data:
                vectors[item["index"]] = [float(x) for x in item["embedding"]]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed embeddings payload: {exc}") from exc
        if any(v is None for v in vectors):
            raise ProtocolError("embeddings payload does not cover every input index")
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise ProtocolError(f"inconsistent embedding dimensions in one batch: {sorted(dims)}")
        return vectors

    def _map_ordered(self, calls: Sequence[Callable[[], object]]) -> list[object]:
        """Run calls with bounded concurrency; results (or exceptions) in call order."""
        if len(calls) <= 1 or self.config.max_concurrency <= 1:
            return [self._capture(call) for call in calls]
        with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
            return list(pool.map(self._capture, calls))

    @staticmethod
    def _capture(call: Callable[[], object]) -> object:
        try:
            return call()
        except (TransportError, RefusalError, ProtocolError) as exc:
            return exc

    # -- pipeline operations ---------------------------------------------------

    def generate_rationales(
        self,
        examples: Sequence[QAExample],
        config: PipelineConfig,
        teacher: ModelRole,
        catalogue: dict[str, str],
        template_dir: str | None = None,
    ) -> tuple[list[RationaleRecord], list[tuple[str, str]]]:
        """Sample l rationales per example from the teacher and flag correctness.

        Returns (records, failures); a failed example is skipped and reported,
        the run continues. |records| == (|examples| - |failures|) * l.
        """
        def make_call(example: QAExample) -> Callable[[], GenerationResponse]:
            prompt = render_cot_prompt(example.task, example.question, catalogue, template_dir)
            request = GenerationRequest(
                role=teacher,
                messages=[("user", prompt)],
                temperature=config.teacher_temperature,
                max_new_tokens=config.max_new_tokens["rationale"],
                num_return_sequences=config.l,
            )
            return lambda: self.complete(request)

        results = self._map_ordered([make_call(example) for example in examples])
        records: list[RationaleRecord] = []
        failures: list[tuple[str, str]] = []
        for example, result in zip(examples, results):
            if isinstance(result, Exception):
                logger.warning("rationale generation failed for %s: %s", example.id, result)
                failures.append((example.id, str(result)))
                continue
            for j, sequence in enumerate(result.sequences):
                extracted = extract_answer(sequence.text)
                correct = exact_match(extracted, example.answer)
                records.append(
                    RationaleRecord(
                        example_id=example.id,
                        sample_index=j,
                        rationale=sequence.text,
                        extracted_answer=extracted,
                        correct=correct,
                        model=teacher.model_name,
                        temperature=config.teacher_temperature,
                    )
                )
        return records, failures

    def generate_specialized_knowledge(
        self,
        case: ErrorCase,
        variant: str,
        config: PipelineConfig,
        teacher: ModelRole,
        template_dir: str | None = None,
    ) -> KnowledgeEntry:
        """Ask the targeted teacher to analyze one error case.

        A reply that does not follow the return format yields an entry with
        parse_ok=False and the raw output preserved for curation.
        """
        if not case.predicted_rationale:
            raise ValueError(f"case {case.example_id}: predicted rationale must be non-empty")
        prompt = render_knowledge_prompt(
            case.question, case.predicted_rationale, variant, template_dir
        )
        request = GenerationRequest(
            role=teacher,
            messages=[("user", prompt)],
            temperature=config.teacher_temperature,
            max_new_tokens=config.max_new_tokens["knowledge"],
            num_return_sequences=1,
        )
        try:
            response = self.complete(request)
        except (TransportError, RefusalError, ProtocolError) as exc:
            raise GenerationError(case.example_id, exc) from exc
        text = response.sequences[0].text
        summary, supplementary, parse_ok = parse_knowledge_output(text, variant)
        return KnowledgeEntry(
            entry_id=f"k-{case.example_id}",
            example_id=case.example_id,
            question=case.question,
            learning_summary=summary if parse_ok else "",
            supplementary_knowledge=supplementary if parse_ok else "",
            raw_output=text,
            parse_ok=parse_ok,
        )


_SUMMARY_LABEL = re.compile(r"^[ \t]*learning summary:[ \t]*", re.IGNORECASE | re.MULTILINE)
_SUPPLEMENT_LABEL = re.compile(r"^[ \t]*supplementary knowledge:[ \t]*", re.IGNORECASE | re.MULTILINE)


def parse_knowledge_output(text: str, variant: str = "full") -> tuple[str, str, bool]:
    """Split a teacher reply into (learning_summary, supplementary_knowledge, parse_ok).

    Labels are matched case-insensitively at line starts, left to right: the
    summary runs from the first "Learning Summary:" to "Supplementary
    Knowledge:" (or the end), the supplement from that label to the end.
    Swapped label order or a missing/empty summary fails the parse; the
    variant does not change the rule, only which template produced the text.
    """
    if not text:
        return "", "", False
    summary_match = _SUMMARY_LABEL.search(text)
    if summary_match is None:
        return "", "", False
    supplement_match = _SUPPLEMENT_LABEL.search(text)
    if supplement_match is not None and supplement_match.start() < summary_match.start():
        return "", "", False
    summary_end = supplement_match.start() if supplement_match else len(text)
    summary = text[summary_match.end():summary_end].strip()
    supplementary = text[supplement_match.end():].strip() if supplement_match else ""
    if not summary:
        return "", "", False
    return summary, supplementary, True


def build_knowledge_entries(
    client: LlmClient,
    cases: Iterable[ErrorCase],
    variant: str,
    config: PipelineConfig,
    teacher: ModelRole,
    template_dir: str | None = None,
) -> tuple[list[KnowledgeEntry], list[tuple[str, str]]]:
    """Generate knowledge for every error case; failures reported, run continues."""
    entries: list[KnowledgeEntry] = []
    failures: list[tuple[str, str]] = []
    for case in cases:
        try:
            entries.append(
                client.generate_specialized_knowledge(case, variant, config, teacher, template_dir)
            )
        except (GenerationError, ValueError) as exc:
            logger.warning("knowledge generation failed for %s: %s", case.example_id, exc)
            failures.append((case.example_id, str(exc)))
    return entries, failures

"""Confidence-gated answering: probe the student, gate on the answer-token
probability margin, and regenerate with retrieved knowledge when the margin
is low.

The probe greedily decodes the DC-format prompt for at most ``probe_steps``
tokens with top-2 alternatives; the margin is the mean top-1 minus top-2
probability over those steps. The gate is strict: retrieval happens iff
``delta < threshold``, so threshold 0 never retrieves. On retrieval the
first-pass text is discarded and the answer is regenerated from the AD
prompt (the exact prompt the trainer saw for AD instances).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .client import GenerationRequest, GenerationResponse
from .core import ModelRole, PipelineConfig, QAExample
from .datasets import render_ad_prompt
from .evaluation import EvalReport, evaluate_student
from .kb import KnowledgeBase
from .kb import topk as kb_topk
from .prompts import render_dc_prompt

logger = logging.getLogger(__name__)

CompleteFn = Callable[[GenerationRequest], GenerationResponse]
EmbedFn = Callable[[Sequence[str]], list[list[float]]]


class GateError(ValueError):
    pass


def compute_delta(per_step: Sequence[tuple[float, float]]) -> float:
    """Mean (top1 - top2) probability margin over the probed steps, in [0, 1]."""
    if not per_step:
        raise GateError("no answer tokens were produced; delta is undefined")
    for p1, p2 in per_step:
        if not (0.0 <= p2 <= p1 <= 1.0):
            raise GateError(f"invalid probability pair ({p1}, {p2})")
    delta = math.fsum(p1 - p2 for p1, p2 in per_step) / len(per_step)
    return min(1.0, max(0.0, delta))


@dataclass(frozen=True)
class ConfidenceReport:
    """One gated answer: probe margins, the decision, and both generations."""

    example_id: str
    per_step: tuple[tuple[float, float], ...]
    steps_used: int
    delta: float
    retrieved: bool
    knowledge_ids: tuple[str, ...]
    first_pass_text: str
    final_text: str
    probe_empty: bool = False
    kb_empty_fallback: bool = False

    def to_record(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "per_step": [[p1, p2] for p1, p2 in self.per_step],
            "steps_used": self.steps_used,
            "delta": self.delta,
            "retrieved": self.retrieved,
            "knowledge_ids": list(self.knowledge_ids),
            "first_pass_text": self.first_pass_text,
            "final_text": self.final_text,
            "probe_empty": self.probe_empty,
            "kb_empty_fallback": self.kb_empty_fallback,
        }


def _per_step_margins(response: GenerationResponse, cap: int) -> list[tuple[float, float]]:
    tokens = response.sequences[0].tokens or ()
    margins = []
    for token in tokens[:cap]:
        margins.append((token.top[0][1], token.top[1][1]))
    return margins


def answer_adaptive(
    example: QAExample,
    kb: KnowledgeBase,
    config: PipelineConfig,
    student: CompleteFn,
    student_role: ModelRole,
    embed: EmbedFn | None = None,
    threshold: float | None = None,
    template_dir: str | None = None,
) -> ConfidenceReport:
    """Probe, gate, and answer one question.

    A probe that yields zero tokens is treated as zero confidence: retrieval
    is forced and the report flags ``probe_empty`` (that report is exempt from
    the ``retrieved == (delta < threshold)`` identity). When retrieval is
    requested but the KB is empty, the final answer falls back to the DC
    prompt and ``kb_empty_fallback`` is flagged.
    """
    threshold = config.delta_threshold if threshold is None else threshold
    dc_prompt = render_dc_prompt(example.question, template_dir)
    probe = student(
        GenerationRequest(
            role=student_role,
            messages=[("user", dc_prompt)],
            temperature=0.0,
            max_new_tokens=config.probe_steps,
            want_logprobs=True,
            top_logprobs_k=2,
        )
    )
    per_step = _per_step_margins(probe, config.probe_steps)
    probe_empty = not per_step
    if probe_empty:
        delta = 0.0
        retrieved = True
        logger.warning("probe for %s produced no tokens; forcing retrieval", example.id)
    else:
        delta = compute_delta(per_step)
        retrieved = delta < threshold

    def _generate(prompt: str) -> str:
        response = student(
            GenerationRequest(
                role=student_role,
                messages=[("user", prompt)],
                temperature=0.0,
                max_new_tokens=config.max_new_tokens["student"],
            )
        )
        return response.sequences[0].text

    knowledge_ids: tuple[str, ...] = ()
    kb_empty_fallback = False
    if retrieved:
        results = kb_topk(example.question, config.m, kb, config.retriever, embed=embed)
        if results:
            entries = [kb.entry_by_id(res.entry_id) for res in results]
            knowledge_ids = tuple(res.entry_id for res in results)
            final_text = _generate(render_ad_prompt(example.question, entries, template_dir))
        else:
            kb_empty_fallback = True
            final_text = _generate(dc_prompt)
    else:
        final_text = _generate(dc_prompt)

    return ConfidenceReport(
        example_id=example.id,
        per_step=tuple(per_step),
        steps_used=len(per_step),
        delta=delta,
        retrieved=retrieved,
        knowledge_ids=knowledge_ids,
        first_pass_text=probe.sequences[0].text,
        final_text=final_text,
        probe_empty=probe_empty,
        kb_empty_fallback=kb_empty_fallback,
    )


@dataclass
class InferenceRun:
    reports: list[ConfidenceReport]
    eval_report: EvalReport
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def retrieval_rate(self) -> float:
        return (
            sum(1 for r in self.reports if r.retrieved) / len(self.reports)
            if self.reports
            else 0.0
        )

    def summary(self, config: PipelineConfig, threshold: float, model_ids: dict[str, str]) -> dict:
        return {
            "accuracy": self.eval_report.overall_accuracy,
            "retrieval_rate": self.retrieval_rate,
            "threshold": threshold,
            "m": config.m,
            "probe_steps": config.probe_steps,
            "retriever": config.retriever,
            "models": model_ids,
            "examples": self.eval_report.total,
            "unanswerable": self.eval_report.unanswerable,
            "failures": len(self.failures),
        }


def run_inference(
    dataset: Sequence[QAExample],
    kb: KnowledgeBase,
    config: PipelineConfig,
    student: CompleteFn,
    student_role: ModelRole,
    embed: EmbedFn | None = None,
    threshold: float | None = None,
    template_dir: str | None = None,
) -> InferenceRun:
    """Gate and answer every example; reports come back in dataset order.

    Examples run under the configured concurrency bound, but results are
    joined back in dataset order regardless of completion order. A failed
    example is recorded and scores as an empty generation (incorrect,
    unanswerable); the run continues.
    """

    def _one(example: QAExample) -> ConfidenceReport | Exception:
        try:
            return answer_adaptive(
                example, kb, config, student, student_role, embed, threshold, template_dir
            )
        except Exception as exc:  # noqa: BLE001 - per-item isolation is the contract
            return exc

    dataset = list(dataset)
    if len(dataset) > 1 and config.max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
            outcomes = list(pool.map(_one, dataset))
    else:
        outcomes = [_one(example) for example in dataset]

    reports: list[ConfidenceReport] = []
    failures: list[tuple[str, str]] = []
    generations: dict[str, str] = {}
    for example, outcome in zip(dataset, outcomes):
        if isinstance(outcome, Exception):
            logger.warning("inference failed for %s: %s", example.id, outcome)
            failures.append((example.id, str(outcome)))
            generations[example.id] = ""
            continue
        reports.append(outcome)
        generations[example.id] = outcome.final_text
    eval_report = evaluate_student(dataset, generations)
    return InferenceRun(reports=reports, eval_report=eval_report, failures=failures)

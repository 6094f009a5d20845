"""Answer extraction, exact-match scoring, and student error collection.

All operations are pure. The answer marker and its extraction/normalization
rules are the single source of truth for correctness everywhere in the
pipeline (rationale filtering, error collection, final evaluation).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any, Iterable, Mapping

from .core import ErrorCase, QAExample

ANSWER_MARKER = "Therefore, the answer is"
_MARKER_RE = re.compile(re.escape(ANSWER_MARKER), re.IGNORECASE)

_SURROUND_PAIRS = {"(": ")", '"': '"', "'": "'"}


class EvaluationError(ValueError):
    """Raised when evaluation inputs are inconsistent (e.g. a missing generation)."""


def extract_answer(generation: str) -> str | None:
    """Return the text after the LAST answer marker, or None when absent.

    Matching is case-insensitive; the remainder is stripped of surrounding
    whitespace and one trailing period. Rationales sometimes restate the
    marker mid-chain, so the final occurrence is the committed answer.
    """
    last = None
    for match in _MARKER_RE.finditer(generation):
        last = match
    if last is None:
        return None
    answer = generation[last.end():].strip()
    if answer.endswith("."):
        answer = answer[:-1].rstrip()
    return answer or None


def normalize_answer(text: str) -> str:
    """Lowercase, trim, strip one surrounding paren/quote layer, drop '$' and ','."""
    out = text.strip().lower()
    if len(out) >= 2 and out[0] in _SURROUND_PAIRS and out[-1] == _SURROUND_PAIRS[out[0]]:
        out = out[1:-1]
    out = out.replace("$", "").replace(",", "")
    return out.strip()


def _as_decimal(text: str) -> Decimal | None:
    try:
        return Decimal(text)
    except (InvalidOperation, ValueError):
        return None


def exact_match(predicted: str | None, gold: str) -> bool:
    """True iff normalized forms are equal; numeric strings compare as decimals.

    Decimal comparison is exact (75 == 75.00), no epsilon: gold answers are
    exact, and tolerances would let near-miss arithmetic pass.
    """
    if predicted is None:
        return False
    p, g = normalize_answer(predicted), normalize_answer(gold)
    if p == g:
        return True
    dp, dg = _as_decimal(p), _as_decimal(g)
    if dp is not None and dg is not None:
        return dp == dg
    return False


@dataclass
class EvalReport:
    """Per-task and overall exact-match accuracy."""

    per_task: dict[str, dict[str, Any]] = field(default_factory=dict)
    correct: int = 0
    total: int = 0
    unanswerable: int = 0

    @property
    def overall_accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_document(self) -> dict[str, Any]:
        return {
            "overall_accuracy": self.overall_accuracy,
            "correct": self.correct,
            "total": self.total,
            "unanswerable": self.unanswerable,
            "per_task": self.per_task,
        }


def _check_generations(
    examples: Iterable[QAExample], generations: Mapping[str, str]
) -> list[QAExample]:
    examples = list(examples)
    for example in examples:
        if example.id not in generations:
            raise EvaluationError(f"no generation for example id {example.id!r}")
    return examples


def evaluate_student(
    examples: Iterable[QAExample], generations: Mapping[str, str]
) -> EvalReport:
    """Score generations against gold answers; unextractable answers count wrong."""
    examples = _check_generations(examples, generations)
    report = EvalReport()
    for example in examples:
        predicted = extract_answer(generations[example.id])
        if predicted is None:
            report.unanswerable += 1
        hit = exact_match(predicted, example.answer)
        task = report.per_task.setdefault(
            example.task, {"correct": 0, "total": 0, "accuracy": 0.0}
        )
        task["total"] += 1
        report.total += 1
        if hit:
            task["correct"] += 1
            report.correct += 1
    for task in report.per_task.values():
        task["accuracy"] = task["correct"] / task["total"]
    return report


def collect_errors(
    examples: Iterable[QAExample], generations: Mapping[str, str]
) -> list[ErrorCase]:
    """Return the failed examples, in input order, as error cases.

    An example fails when its extracted answer is absent or does not
    exact-match gold. Together with the correct set this partitions the
    input: the two sets are disjoint and their union is every example.
    """
    examples = _check_generations(examples, generations)
    cases: list[ErrorCase] = []
    for example in examples:
        text = generations[example.id]
        predicted = extract_answer(text)
        if exact_match(predicted, example.answer):
            continue
        cases.append(
            ErrorCase(
                example_id=example.id,
                question=example.question,
                predicted_rationale=text,
                predicted_answer=predicted,
                gold_answer=example.answer,
            )
        )
    return cases

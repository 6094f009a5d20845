"""Supervised training-file emission for the external trainer.

Stage 1 emits STD instances (question -> rationale + answer). Stage 4 emits
the multi-task file: AD (question + retrieved knowledge -> rationale +
answer), AP (question -> answer only), and DC (question alone -> rationale +
answer). The AD knowledge block layout is frozen here and reused verbatim by
adaptive inference, so train and test prompts match exactly.

Gold answers are only ever written to instance *outputs*; inputs are built
from the question and retrieved knowledge text alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .core import KnowledgeEntry, PipelineConfig, QAExample, RationaleRecord
from .evaluation import ANSWER_MARKER, extract_answer
from .kb import KnowledgeBase, topk
from .prompts import render_ad_template, render_ap_prompt, render_dc_prompt

TASK_KINDS = ("STD", "AD", "AP", "DC")
_KIND_ORDER = {kind: i for i, kind in enumerate(TASK_KINDS)}


class BuilderError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingInstance:
    task_kind: str
    input: str
    output: str
    source_id: str
    knowledge_ids: tuple[str, ...] = field(default_factory=tuple)
    sample_index: int = 0

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise BuilderError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == "AD" and not self.knowledge_ids:
            raise BuilderError("AD instances must reference retrieved knowledge")
        if self.task_kind != "AD" and self.knowledge_ids:
            raise BuilderError(f"{self.task_kind} instances must not reference knowledge")

    def to_record(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "input": self.input,
            "output": self.output,
            "source_id": self.source_id,
            "knowledge_ids": list(self.knowledge_ids),
        }


def render_target(rationale: str, answer: str) -> str:
    """Rationale followed by the answer statement, without duplicating the marker.

    Retained rationales already conclude with the marker sentence (that is
    what the correctness filter extracted the answer from), so the statement
    is appended only when no marker is present at all.
    """
    text = rationale.rstrip()
    if extract_answer(text) is not None:
        return text
    return f"{text} {ANSWER_MARKER} {answer}."


def _index_examples(examples: Iterable[QAExample]) -> dict[str, QAExample]:
    return {example.id: example for example in examples}


def _check_records(
    records: Sequence[RationaleRecord], by_id: Mapping[str, QAExample]
) -> None:
    for record in records:
        if not record.correct:
            raise BuilderError(
                f"record {record.example_id}/{record.sample_index}: builders take retained "
                "(correct=true) records only"
            )
        if record.example_id not in by_id:
            raise BuilderError(f"record references unknown example {record.example_id!r}")


def build_std_dataset(
    records: Sequence[RationaleRecord],
    examples: Sequence[QAExample],
    template_dir: str | None = None,
) -> list[TrainingInstance]:
    """One STD instance per retained (example, sample) pair."""
    by_id = _index_examples(examples)
    _check_records(records, by_id)
    instances = [
        TrainingInstance(
            task_kind="STD",
            input=render_dc_prompt(by_id[record.example_id].question, template_dir),
            output=render_target(record.rationale, by_id[record.example_id].answer),
            source_id=record.example_id,
            sample_index=record.sample_index,
        )
        for record in records
    ]
    instances.sort(key=lambda inst: (inst.source_id, inst.sample_index))
    return instances


def render_knowledge_block(entries: Sequence[KnowledgeEntry]) -> str:
    """Entries in retrieval rank order; empty supplementary sections are elided."""
    parts = []
    for entry in entries:
        text = f"Learning Summary: {entry.learning_summary}"
        if entry.supplementary_knowledge:
            text += f"\nSupplementary Knowledge: {entry.supplementary_knowledge}"
        parts.append(text)
    return "\n\n".join(parts)


def render_ad_prompt(
    question: str, knowledge: Sequence[KnowledgeEntry], template_dir: str | None = None
) -> str:
    """The frozen AD layout shared by training emission and adaptive inference."""
    if not knowledge:
        raise BuilderError("AD prompt needs at least one knowledge entry")
    return render_ad_template(question, render_knowledge_block(knowledge), template_dir)


def build_multitask_dataset(
    records: Sequence[RationaleRecord],
    examples: Sequence[QAExample],
    kb: KnowledgeBase | None,
    config: PipelineConfig,
    tasks: Sequence[str] = ("AD", "AP", "DC"),
    embed: Callable[[Sequence[str]], list[list[float]]] | None = None,
    template_dir: str | None = None,
) -> list[TrainingInstance]:
    """The stage-4 file: AD and DC per retained record, AP per example.

    Counts: |AD| = |DC| = number of retained records, |AP| = |examples|.
    Questions whose every sample failed the filter still contribute AP.
    """
    tasks = tuple(tasks)
    unknown = [t for t in tasks if t not in ("AD", "AP", "DC")]
    if unknown:
        raise BuilderError(f"unknown multitask selections: {unknown}")
    by_id = _index_examples(examples)
    _check_records(records, by_id)

    instances: list[TrainingInstance] = []

    if "AD" in tasks:
        if kb is None or not kb.entries:
            raise BuilderError(
                "AD instances need retrieved knowledge: build the knowledge base first"
            )
        retrieved: dict[str, tuple[str, tuple[str, ...]]] = {}
        for example_id in sorted({r.example_id for r in records}):
            example = by_id[example_id]
            results = topk(example.question, config.m, kb, config.retriever, embed=embed)
            entries = [kb.entry_by_id(res.entry_id) for res in results]
            retrieved[example_id] = (
                render_ad_prompt(example.question, entries, template_dir),
                tuple(res.entry_id for res in results),
            )
        for record in records:
            prompt, knowledge_ids = retrieved[record.example_id]
            instances.append(
                TrainingInstance(
                    task_kind="AD",
                    input=prompt,
                    output=render_target(record.rationale, by_id[record.example_id].answer),
                    source_id=record.example_id,
                    knowledge_ids=knowledge_ids,
                    sample_index=record.sample_index,
                )
            )

    if "AP" in tasks:
        for example in examples:
            instances.append(
                TrainingInstance(
                    task_kind="AP",
                    input=render_ap_prompt(example.question, template_dir),
                    output=example.answer,
                    source_id=example.id,
                )
            )

    if "DC" in tasks:
        for record in records:
            instances.append(
                TrainingInstance(
                    task_kind="DC",
                    input=render_dc_prompt(by_id[record.example_id].question, template_dir),
                    output=render_target(record.rationale, by_id[record.example_id].answer),
                    source_id=record.example_id,
                    sample_index=record.sample_index,
                )
            )

    instances.sort(key=lambda i: (_KIND_ORDER[i.task_kind], i.source_id, i.sample_index))
    return instances


def find_gold_leakage(
    instances: Sequence[TrainingInstance], examples: Sequence[QAExample]
) -> list[tuple[str, str]]:
    """(source_id, task_kind) pairs whose input text contains the gold answer."""
    by_id = _index_examples(examples)
    hits = []
    for instance in instances:
        gold = by_id[instance.source_id].answer
        if gold and gold in instance.input:
            hits.append((instance.source_id, instance.task_kind))
    return hits


def write_training_file(instances: Iterable[TrainingInstance], path: str | Path) -> int:
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance.to_record(), ensure_ascii=False) + "\n")
            count += 1
    return count


def load_rationale_records(path: str | Path) -> list[RationaleRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            records.append(
                RationaleRecord(
                    example_id=rec["example_id"],
                    sample_index=int(rec["sample_index"]),
                    rationale=rec["rationale"],
                    extracted_answer=rec.get("extracted_answer"),
                    correct=bool(rec["correct"]),
                    model=rec.get("model", ""),
                    temperature=float(rec.get("temperature", 0.0)),
                )
            )
    return records

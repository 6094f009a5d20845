"""Shared domain types, dataset file I/O, and pipeline configuration.

Everything downstream (client, evaluator, KB, builders, inference) consumes
the types defined here. All types are immutable after construction and safe
to share across threads; loaders are single-threaded per file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping
from urllib.parse import urlparse

logger = logging.getLogger(__name__)

VALID_SPLITS = ("train", "test")
RETRIEVERS = ("lexical", "dense")

# Generation-length defaults, per role.
DEFAULT_MAX_NEW_TOKENS = {"rationale": 2048, "knowledge": 1024, "student": 1024}


class DatasetError(ValueError):
    """Raised for malformed dataset files (bad line, duplicate id, bad schema)."""


class ConfigError(ValueError):
    """Raised when configuration validation fails; carries one message per field."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class QAExample:
    """One training/eval item: a question with its gold answer."""

    id: str
    task: str
    question: str
    answer: str
    options: tuple[str, ...] | None = None
    split: str = "train"
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise DatasetError("example id must be non-empty")
        if not self.answer:
            raise DatasetError(f"example {self.id!r}: answer must be non-empty")
        if self.split not in VALID_SPLITS:
            raise DatasetError(f"example {self.id!r}: split must be one of {VALID_SPLITS}")
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "id": self.id,
            "task": self.task,
            "question": self.question,
            "answer": self.answer,
        }
        if self.options is not None:
            rec["options"] = list(self.options)
        rec["split"] = self.split
        rec.update(self.extra)
        return rec


@dataclass(frozen=True)
class RationaleRecord:
    """One teacher-sampled rationale with its extracted answer and correctness flag."""

    example_id: str
    sample_index: int
    rationale: str
    extracted_answer: str | None
    correct: bool
    model: str
    temperature: float

    def __post_init__(self):
        if self.sample_index < 0:
            raise ValueError("sample_index must be >= 0")
        if self.correct and not self.extracted_answer:
            raise ValueError(
                f"record {self.example_id}/{self.sample_index}: correct=True requires an extracted answer"
            )

    def to_record(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "sample_index": self.sample_index,
            "rationale": self.rationale,
            "extracted_answer": self.extracted_answer,
            "correct": self.correct,
            "model": self.model,
            "temperature": self.temperature,
        }


@dataclass(frozen=True)
class ErrorCase:
    """A student failure: question, wrong rationale/answer, and the gold answer.

    Membership (predicted answer absent or mismatched) is guaranteed by the
    evaluator's collect_errors; this type does not re-check normalization."""

    example_id: str
    question: str
    predicted_rationale: str
    predicted_answer: str | None
    gold_answer: str

    def to_record(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "question": self.question,
            "predicted_rationale": self.predicted_rationale,
            "predicted_answer": self.predicted_answer,
            "gold_answer": self.gold_answer,
        }


@dataclass(frozen=True)
class KnowledgeEntry:
    """Specialized knowledge for one failed question.

    learning_summary holds the generalized thought-process guidance and
    supplementary_knowledge the background facts (may be empty). raw_output
    preserves the full teacher text so unparseable replies stay auditable."""

    entry_id: str
    example_id: str
    question: str
    learning_summary: str
    supplementary_knowledge: str
    raw_output: str
    parse_ok: bool

    def __post_init__(self):
        if not self.entry_id:
            raise ValueError("entry_id must be non-empty")
        if self.parse_ok and not self.learning_summary:
            raise ValueError(f"entry {self.entry_id}: parse_ok=True requires a learning summary")

    def to_record(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "example_id": self.example_id,
            "question": self.question,
            "learning_summary": self.learning_summary,
            "supplementary_knowledge": self.supplementary_knowledge,
            "raw_output": self.raw_output,
            "parse_ok": self.parse_ok,
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "KnowledgeEntry":
        return cls(
            entry_id=rec["entry_id"],
            example_id=rec["example_id"],
            question=rec["question"],
            learning_summary=rec["learning_summary"],
            supplementary_knowledge=rec.get("supplementary_knowledge", ""),
            raw_output=rec.get("raw_output", ""),
            parse_ok=bool(rec["parse_ok"]),
        )


ROLE_NAMES = ("teacher_general", "teacher_targeted", "student", "embedder")


@dataclass(frozen=True)
class ModelRole:
    """One remote model service: endpoint, model name, and credential env var."""

    role: str
    endpoint: str
    model_name: str
    credentials: str = ""

    def __post_init__(self):
        if self.role not in ROLE_NAMES:
            raise ConfigError([f"role: unknown role {self.role!r}"])
        parsed = urlparse(self.endpoint)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigError([f"{self.role}.endpoint: not a well-formed URL: {self.endpoint!r}"])

    def api_key(self) -> str | None:
        """Resolve the credential from its named environment variable, if any."""
        if not self.credentials:
            return None
        value = os.environ.get(self.credentials)
        if value is None:
            raise ConfigError(
                [f"{self.role}.credentials: environment variable {self.credentials!r} is not set"]
            )
        return value


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs shared across pipeline stages.

    Defaults follow the reference setup: two rationale samples per question,
    one knowledge entry per query, gate threshold 0.68, a 16-step greedy
    probe, and teacher sampling at temperature 0.8.
    """

    l: int = 2
    m: int = 1
    delta_threshold: float = 0.68
    probe_steps: int = 16
    teacher_temperature: float = 0.8
    max_new_tokens: Mapping[str, int] = field(
        default_factory=lambda: dict(DEFAULT_MAX_NEW_TOKENS)
    )
    retriever: str = "lexical"
    max_concurrency: int = 4
    request_retries: int = 3
    retry_backoff: float = 0.5
    request_timeout: float = 120.0


def validate_config(raw: Mapping[str, Any] | PipelineConfig) -> PipelineConfig:
    """Check invariants and fill defaults; raises ConfigError listing every violated field."""
    if isinstance(raw, PipelineConfig):
        raw = {
            "l": raw.l,
            "m": raw.m,
            "delta_threshold": raw.delta_threshold,
            "probe_steps": raw.probe_steps,
            "teacher_temperature": raw.teacher_temperature,
            "max_new_tokens": dict(raw.max_new_tokens),
            "retriever": raw.retriever,
            "max_concurrency": raw.max_concurrency,
            "request_retries": raw.request_retries,
            "retry_backoff": raw.retry_backoff,
            "request_timeout": raw.request_timeout,
        }
    errors: list[str] = []
    defaults = PipelineConfig()
    known = {
        "l", "m", "delta_threshold", "probe_steps", "teacher_temperature",
        "max_new_tokens", "retriever", "max_concurrency", "request_retries",
        "retry_backoff", "request_timeout",
    }
    for key in raw:
        if key not in known:
            errors.append(f"{key}: unknown pipeline field")

    def _get(name, caster):
        value = raw.get(name, getattr(defaults, name))
        try:
            return caster(value)
        except (TypeError, ValueError):
            errors.append(f"{name}: cannot interpret {value!r}")
            return getattr(defaults, name)

    l = _get("l", int)
    m = _get("m", int)
    delta_threshold = _get("delta_threshold", float)
    probe_steps = _get("probe_steps", int)
    teacher_temperature = _get("teacher_temperature", float)
    retriever = _get("retriever", str)
    max_concurrency = _get("max_concurrency", int)
    request_retries = _get("request_retries", int)
    retry_backoff = _get("retry_backoff", float)
    request_timeout = _get("request_timeout", float)

    max_new_tokens = dict(DEFAULT_MAX_NEW_TOKENS)
    supplied_budgets = raw.get("max_new_tokens", {})
    if not isinstance(supplied_budgets, Mapping):
        errors.append("max_new_tokens: expected a mapping of role -> token budget")
    else:
        for role, budget in supplied_budgets.items():
            if role not in DEFAULT_MAX_NEW_TOKENS:
                errors.append(f"max_new_tokens.{role}: unknown role")
            elif not isinstance(budget, int) or budget < 1:
                errors.append(f"max_new_tokens.{role}: must be a positive integer")
            else:
                max_new_tokens[role] = budget

    if l < 1:
        errors.append("l: must be >= 1")
    if m < 1:
        errors.append("m: must be >= 1")
    if not (0.0 <= delta_threshold <= 1.0):
        errors.append("delta_threshold: must be in [0, 1]")
    if probe_steps < 1:
        errors.append("probe_steps: must be >= 1")
    if teacher_temperature < 0.0:
        errors.append("teacher_temperature: must be >= 0")
    if retriever not in RETRIEVERS:
        errors.append(f"retriever: must be one of {RETRIEVERS}")
    if max_concurrency < 1:
        errors.append("max_concurrency: must be >= 1")
    if request_retries < 1:
        errors.append("request_retries: must be >= 1")
    if retry_backoff < 0:
        errors.append("retry_backoff: must be >= 0")
    if request_timeout <= 0:
        errors.append("request_timeout: must be > 0")

    if errors:
        raise ConfigError(errors)
    return PipelineConfig(
        l=l,
        m=m,
        delta_threshold=delta_threshold,
        probe_steps=probe_steps,
        teacher_temperature=teacher_temperature,
        max_new_tokens=max_new_tokens,
        retriever=retriever,
        max_concurrency=max_concurrency,
        request_retries=request_retries,
        retry_backoff=retry_backoff,
        request_timeout=request_timeout,
    )


def _answer_matches_options(answer: str, options: Iterable[str]) -> bool:
    options = list(options)
    stripped = answer.strip()
    if any(stripped == opt.strip() for opt in options):
        return True
    # Positional letter labels: "A", "(A)", "A)".
    label = stripped.strip("()").rstrip(")").strip()
    if len(label) == 1 and label.isalpha():
        return ord(label.upper()) - ord("A") < len(options)
    return False


KNOWN_DATASET_FIELDS = ("id", "task", "question", "answer", "options", "split")


def load_dataset(path: str | Path, warnings: list[str] | None = None) -> list[QAExample]:
    """Load a line-delimited dataset file in file order.

    Hard errors (malformed line, missing/empty answer, duplicate id) raise
    DatasetError naming the offending line. Soft violations (answer not among
    the declared options) are reported via the warnings sink / logger but the
    example is kept. Records without an id get "<task>-<zero-padded index>"
    with a per-task counter, so joins stay stable across stages.
    """
    path = Path(path)
    examples: list[QAExample] = []
    seen: dict[str, int] = {}
    task_counters: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed line: {exc}") from exc
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{lineno}: expected an object per line")
            for field_name in ("task", "question", "answer"):
                if field_name not in rec:
                    raise DatasetError(f"{path}:{lineno}: missing {field_name!r} field")
            task = str(rec["task"])
            ex_id = rec.get("id")
            if ex_id is None:
                index = task_counters.get(task, 0)
                task_counters[task] = index + 1
                ex_id = f"{task}-{index:04d}"
            ex_id = str(ex_id)
            if ex_id in seen:
                raise DatasetError(
                    f"{path}:{lineno}: duplicate id {ex_id!r} (first seen on line {seen[ex_id]})"
                )
            seen[ex_id] = lineno
            options = rec.get("options")
            if options is not None:
                if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
                    raise DatasetError(f"{path}:{lineno}: options must be an array of strings")
                options = tuple(options)
            extra = {k: v for k, v in rec.items() if k not in KNOWN_DATASET_FIELDS}
            try:
                example = QAExample(
                    id=ex_id,
                    task=task,
                    question=str(rec["question"]),
                    answer=str(rec["answer"]),
                    options=options,
                    split=rec.get("split", "train"),
                    extra=extra,
                )
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if options is not None and not _answer_matches_options(example.answer, options):
                message = (
                    f"{path}:{lineno}: answer {example.answer!r} matches no option "
                    f"label or text of {list(options)}"
                )
                logger.warning(message)
                if warnings is not None:
                    warnings.append(message)
            examples.append(example)
    return examples


def save_dataset(examples: Iterable[QAExample], path: str | Path) -> None:
    """Write examples one JSON object per line; unknown fields round-trip."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example.to_record(), ensure_ascii=False) + "\n")


def write_jsonl(records: Iterable[Mapping[str, Any]], path: str | Path) -> int:
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    records: list[dict[str, Any]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed line: {exc}") from exc
    return records


def config_digest(document: Mapping[str, Any]) -> str:
    """Stable hex digest of a JSON-serializable config document."""
    canonical = json.dumps(document, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    """Parsed top-level configuration file: model roles plus pipeline knobs."""

    roles: Mapping[str, ModelRole]
    pipeline: PipelineConfig
    task_catalogue: str | None = None
    template_dir: str | None = None
    digest: str = ""

    def role(self, name: str) -> ModelRole:
        if name in self.roles:
            return self.roles[name]
        # The targeted teacher defaults to the general teacher's service.
        if name == "teacher_targeted" and "teacher_general" in self.roles:
            base = self.roles["teacher_general"]
            return replace(base, role="teacher_targeted")
        raise ConfigError([f"roles.{name}: no such role configured"])

    def has_role(self, name: str) -> bool:
        return name in self.roles or (name == "teacher_targeted" and "teacher_general" in self.roles)


def load_run_config(path: str | Path) -> RunConfig:
    """Load and validate a configuration file; errors name each bad field."""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
    if not isinstance(document, dict):
        raise ConfigError(["config: top level must be an object"])
    errors: list[str] = []
    roles: dict[str, ModelRole] = {}
    for name, spec in (document.get("roles") or {}).items():
        if name not in ROLE_NAMES:
            errors.append(f"roles.{name}: unknown role")
            continue
        try:
            roles[name] = ModelRole(
                role=name,
                endpoint=str(spec.get("endpoint", "")),
                model_name=str(spec.get("model_name", "")),
                credentials=str(spec.get("credentials", "") or ""),
            )
        except ConfigError as exc:
            errors.extend(exc.errors)
    try:
        pipeline = validate_config(document.get("pipeline") or {})
    except ConfigError as exc:
        errors.extend(exc.errors)
        pipeline = PipelineConfig()
    if errors:
        raise ConfigError(errors)
    return RunConfig(
        roles=roles,
        pipeline=pipeline,
        task_catalogue=document.get("task_catalogue"),
        template_dir=document.get("template_dir"),
        digest=config_digest(document),
    )

import json
from pathlib import Path

import pytest

from nesycd.client import GenerationRequest, GenerationResponse, GeneratedSequence, TokenAlternatives
from nesycd.core import KnowledgeEntry, ModelRole, QAExample, RationaleRecord
from nesycd.mockserver import MockModelServer, Scenario

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def pipeline_server():
    """The bundled scenario served in-process on an ephemeral port."""
    server = MockModelServer(Scenario.from_file(FIXTURES / "mock_scenario.json")).start()
    yield server
    server.stop()


def write_config(path: Path, endpoint: str, **pipeline_overrides) -> Path:
    """The bundled config pointed at an ephemeral endpoint."""
    document = json.loads((FIXTURES / "mock_config.json").read_text(encoding="utf-8"))
    for role in document["roles"].values():
        role["endpoint"] = endpoint
    document["pipeline"].update(pipeline_overrides)
    path.write_text(json.dumps(document, indent=2), encoding="utf-8")
    return path


def start_server(document: dict) -> MockModelServer:
    return MockModelServer(Scenario(document)).start()


def make_role(endpoint: str, name: str, role: str = "teacher_general") -> ModelRole:
    return ModelRole(role=role, endpoint=endpoint, model_name=name)


def make_example(i: int, task: str = "toy", answer: str | None = None, split: str = "train") -> QAExample:
    return QAExample(
        id=f"{task}-{i:04d}",
        task=task,
        question=f"What is the value of item {chr(ord('a') + i)}?",
        answer=answer if answer is not None else str(100 + i),
        split=split,
    )


def make_record(example: QAExample, j: int, correct: bool = True) -> RationaleRecord:
    answer = example.answer if correct else "wrong"
    return RationaleRecord(
        example_id=example.id,
        sample_index=j,
        rationale=f"We reason stepwise about {example.question} Therefore, the answer is {answer}.",
        extracted_answer=answer,
        correct=correct,
        model="mock-teacher",
        temperature=0.8,
    )


def make_entry(i: int, question: str | None = None, parse_ok: bool = True) -> KnowledgeEntry:
    return KnowledgeEntry(
        entry_id=f"k-{i:04d}",
        example_id=f"src-{i:04d}",
        question=question if question is not None else f"how does widget {i} work",
        learning_summary=f"1. Study widget {i} carefully." if parse_ok else "",
        supplementary_knowledge="",
        raw_output="raw",
        parse_ok=parse_ok,
    )


class ScriptedStudent:
    """In-memory complete() fake for gate tests.

    Per question: a (p1, p2) margin applied to every probe step, a DC reply,
    and an AD reply used when the prompt carries a knowledge block. Records
    every prompt it sees so tests can assert prompt parity.
    """

    def __init__(self, script: dict[str, dict]):
        self.script = script
        self.prompts: list[str] = []

    def _lookup(self, prompt: str) -> dict:
        for fragment, entry in self.script.items():
            if fragment in prompt:
                return entry
        raise AssertionError(f"no scripted behaviour for prompt: {prompt[:80]!r}")

    def __call__(self, request: GenerationRequest) -> GenerationResponse:
        prompt = request.messages[-1][1]
        self.prompts.append(prompt)
        entry = self._lookup(prompt)
        if request.want_logprobs:
            text = entry.get("probe_text", entry["dc"])
            words = text.split()[: request.max_new_tokens]
            p1, p2 = entry["margin"]
            tokens = tuple(
                TokenAlternatives(token=w, top=((w, p1), ("<alt>", p2))) for w in words
            )
            return GenerationResponse(
                sequences=(GeneratedSequence(text=" ".join(words), tokens=tokens),)
            )
        text = entry["ad"] if "Specialized Knowledge:" in prompt else entry["dc"]
        return GenerationResponse(sequences=(GeneratedSequence(text=text),))

import json

import pytest

from nesycd.core import (
    ConfigError,
    DatasetError,
    KnowledgeEntry,
    ModelRole,
    PipelineConfig,
    QAExample,
    RationaleRecord,
    load_dataset,
    load_run_config,
    save_dataset,
    validate_config,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def test_empty_file_loads_empty_list(tmp_path):
    path = write_lines(tmp_path / "data.jsonl", [])
    assert load_dataset(path) == []


def test_three_line_fixture_in_file_order(tmp_path):
    lines = [
        json.dumps({"id": f"t-{i}", "task": "toy", "question": f"q{i}", "answer": str(i + 1)})
        for i in range(3)
    ]
    path = write_lines(tmp_path / "data.jsonl", lines)
    examples = load_dataset(path)
    assert [ex.id for ex in examples] == ["t-0", "t-1", "t-2"]
    assert all(ex.split == "train" for ex in examples)


def test_missing_answer_field_names_line(tmp_path):
    lines = [
        json.dumps({"id": "a", "task": "toy", "question": "q", "answer": "1"}),
        json.dumps({"id": "b", "task": "toy", "question": "q"}),
    ]
    path = write_lines(tmp_path / "data.jsonl", lines)
    with pytest.raises(DatasetError, match=r":2: missing 'answer'"):
        load_dataset(path)


def test_malformed_line_names_line(tmp_path):
    path = write_lines(tmp_path / "data.jsonl", ["{not json"])
    with pytest.raises(DatasetError, match=r":1: malformed line"):
        load_dataset(path)


def test_duplicate_id_names_both_occurrences(tmp_path):
    record = {"id": "dup", "task": "toy", "question": "q", "answer": "1"}
    path = write_lines(tmp_path / "data.jsonl", [json.dumps(record), json.dumps(record)])
    with pytest.raises(DatasetError, match=r":2: duplicate id 'dup' \(first seen on line 1\)"):
        load_dataset(path)


def test_empty_answer_rejected(tmp_path):
    path = write_lines(
        tmp_path / "data.jsonl",
        [json.dumps({"id": "a", "task": "toy", "question": "q", "answer": ""})],
    )
    with pytest.raises(DatasetError, match="answer must be non-empty"):
        load_dataset(path)


def test_id_synthesis_per_task_counter(tmp_path):
    lines = [
        json.dumps({"task": "alpha", "question": "q", "answer": "1"}),
        json.dumps({"task": "beta", "question": "q", "answer": "2"}),
        json.dumps({"task": "alpha", "question": "q", "answer": "3"}),
    ]
    path = write_lines(tmp_path / "data.jsonl", lines)
    assert [ex.id for ex in load_dataset(path)] == ["alpha-0000", "beta-0000", "alpha-0001"]


def test_option_mismatch_reported_not_dropped(tmp_path):
    line = json.dumps(
        {"id": "a", "task": "toy", "question": "q", "answer": "Maybe", "options": ["Yes", "No"]}
    )
    path = write_lines(tmp_path / "data.jsonl", [line])
    warnings: list[str] = []
    examples = load_dataset(path, warnings=warnings)
    assert len(examples) == 1 and examples[0].answer == "Maybe"
    assert len(warnings) == 1 and "matches no option" in warnings[0]


def test_option_letter_labels_accepted(tmp_path):
    lines = [
        json.dumps({"id": "a", "task": "t", "question": "q", "answer": "(B)", "options": ["x", "y"]}),
        json.dumps({"id": "b", "task": "t", "question": "q", "answer": "y", "options": ["x", "y"]}),
    ]
    path = write_lines(tmp_path / "data.jsonl", lines)
    warnings: list[str] = []
    load_dataset(path, warnings=warnings)
    assert warnings == []


def test_round_trip_identity(tmp_path):
    lines = [
        json.dumps({"id": "a", "task": "toy", "question": "q é", "answer": "1",
                    "options": ["1", "2"], "split": "test", "provenance": {"source": "x"}}),
        json.dumps({"id": "b", "task": "toy", "question": "q2", "answer": "2"}),
    ]
    path = write_lines(tmp_path / "data.jsonl", lines)
    first = load_dataset(path)
    out = tmp_path / "out.jsonl"
    save_dataset(first, out)
    second = load_dataset(out)
    assert first == second
    assert second[0].extra == {"provenance": {"source": "x"}}


def test_round_trip_random_datasets(tmp_path):
    import random

    rng = random.Random(20240817)
    examples = []
    for i in range(60):
        options = None
        if rng.random() < 0.4:
            options = tuple(str(rng.randint(0, 9)) for _ in range(3))
        examples.append(
            QAExample(
                id=f"r-{i:04d}",
                task=rng.choice(["alpha", "beta/gamma"]),
                question="".join(rng.choice("abc {}\"'\\€\n") for _ in range(rng.randint(1, 30))),
                answer=str(rng.randint(-500, 500)),
                options=options,
                split=rng.choice(["train", "test"]),
                extra={"k": rng.randint(0, 9)} if rng.random() < 0.5 else {},
            )
        )
    path = tmp_path / "random.jsonl"
    save_dataset(examples, path)
    loaded = load_dataset(path)
    assert loaded == examples
    again = tmp_path / "again.jsonl"
    save_dataset(loaded, again)
    assert load_dataset(again) == examples


def test_config_defaults_match_reference_setup():
    cfg = validate_config({})
    assert (cfg.l, cfg.m, cfg.delta_threshold, cfg.probe_steps, cfg.teacher_temperature) == (
        2, 1, 0.68, 16, 0.8,
    )
    assert cfg.max_new_tokens == {"rationale": 2048, "knowledge": 1024, "student": 1024}


def test_config_fills_m_default_when_absent():
    cfg = validate_config({"delta_threshold": 0.68})
    assert cfg.m == 1


@pytest.mark.parametrize(
    "raw, fragment",
    [
        ({"delta_threshold": 1.5}, "delta_threshold"),
        ({"probe_steps": 0}, "probe_steps"),
        ({"l": 0}, "l:"),
        ({"m": -2}, "m:"),
        ({"retriever": "ann"}, "retriever"),
    ],
)
def test_config_violations_name_field(raw, fragment):
    with pytest.raises(ConfigError) as excinfo:
        validate_config(raw)
    assert any(fragment in message for message in excinfo.value.errors)


def test_config_reports_every_violation_at_once():
    with pytest.raises(ConfigError) as excinfo:
        validate_config({"l": 0, "m": 0, "delta_threshold": 2.0})
    assert len(excinfo.value.errors) == 3


def test_validate_config_accepts_config_instance():
    cfg = validate_config(PipelineConfig(m=3))
    assert cfg.m == 3


def test_rationale_record_invariant():
    with pytest.raises(ValueError, match="extracted answer"):
        RationaleRecord("e", 0, "text", None, True, "m", 0.8)
    RationaleRecord("e", 0, "text", None, False, "m", 0.8)


def test_knowledge_entry_invariant():
    with pytest.raises(ValueError, match="learning summary"):
        KnowledgeEntry("k", "e", "q", "", "", "raw", True)
    KnowledgeEntry("k", "e", "q", "", "", "raw", False)


def test_model_role_endpoint_validation():
    with pytest.raises(ConfigError):
        ModelRole("student", "not-a-url", "name")
    role = ModelRole("student", "http://127.0.0.1:1234/v1", "name")
    assert role.api_key() is None


def test_model_role_credentials_env(monkeypatch):
    role = ModelRole("student", "http://h:1/v1", "name", credentials="NESYCD_TEST_KEY")
    with pytest.raises(ConfigError, match="NESYCD_TEST_KEY"):
        role.api_key()
    monkeypatch.setenv("NESYCD_TEST_KEY", "secret")
    assert role.api_key() == "secret"


def test_run_config_teacher_targeted_falls_back(tmp_path):
    document = {
        "roles": {"teacher_general": {"endpoint": "http://h:1/v1", "model_name": "t"}},
        "pipeline": {},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    cfg = load_run_config(path)
    assert cfg.role("teacher_targeted").endpoint == "http://h:1/v1"
    assert cfg.role("teacher_targeted").role == "teacher_targeted"
    assert cfg.digest and cfg.digest == load_run_config(path).digest

import json
from pathlib import Path

import pytest


def write_training_file(path: Path, n: int = 100) -> Path:
    rows = []
    for i in range(n):
        kind = ("STD", "AD", "AP", "DC")[i % 4]
        knowledge = ["k-1"] if kind == "AD" else []
        prefix = "Specialized Knowledge:\nLearning Summary: add digits.\n\n" if kind == "AD" else ""
        rows.append({
            "task_kind": kind,
            "input": f"{prefix}Question: What is {i} plus {i}?\n\nAnswer: think.",
            "output": f" Therefore, the answer is {2 * i}.",
            "source_id": f"t-{i}",
            "knowledge_ids": knowledge,
        })
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture()
def training_file(tmp_path):
    return write_training_file(tmp_path / "train.jsonl")

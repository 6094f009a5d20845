"""Training-file loading and byte-level tokenization.

The input schema is the pipeline's training file: one JSON object per line
with task_kind in {STD, AD, AP, DC}, input, output, source_id, and
knowledge_ids. Any schema violation aborts before a model is ever built.

Tokenization is byte-level (0..255) plus BOS/EOS/PAD specials, so no
vocabulary artifacts or downloads are involved. The supervised pair is the
concatenation [BOS] input output [EOS] with labels masked to IGNORE over the
input span: loss is computed only on output tokens (and EOS).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

TASK_KINDS = ("STD", "AD", "AP", "DC")
REQUIRED_FIELDS = ("task_kind", "input", "output", "source_id", "knowledge_ids")

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259
IGNORE = -100


class SchemaError(ValueError):
    """The training file does not match the emitted-file schema."""


@dataclass(frozen=True)
class TrainingRow:
    task_kind: str
    input: str
    output: str
    source_id: str


def load_training_file(path: str | Path) -> list[TrainingRow]:
    path = Path(path)
    rows: list[TrainingRow] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not JSON: {exc}") from exc
            for field in REQUIRED_FIELDS:
                if field not in rec:
                    raise SchemaError(f"{path}:{lineno}: missing field {field!r}")
            if rec["task_kind"] not in TASK_KINDS:
                raise SchemaError(
                    f"{path}:{lineno}: task_kind {rec['task_kind']!r} not in {TASK_KINDS}"
                )
            if not isinstance(rec["input"], str) or not isinstance(rec["output"], str):
                raise SchemaError(f"{path}:{lineno}: input/output must be strings")
            if not isinstance(rec["knowledge_ids"], list):
                raise SchemaError(f"{path}:{lineno}: knowledge_ids must be a list")
            if not rec["output"]:
                raise SchemaError(f"{path}:{lineno}: empty output span")
            rows.append(
                TrainingRow(
                    task_kind=rec["task_kind"],
                    input=rec["input"],
                    output=rec["output"],
                    source_id=str(rec["source_id"]),
                )
            )
    if not rows:
        raise SchemaError(f"{path}: no training rows")
    return rows


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_tokens(tokens: list[int]) -> str:
    return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")


def encode_example(row: TrainingRow, max_len: int) -> tuple[list[int], list[int]]:
    """([BOS] input output [EOS], labels with the input span masked)."""
    prompt = [BOS] + encode_text(row.input)
    target = encode_text(row.output) + [EOS]
    tokens = (prompt + target)[:max_len]
    labels = ([IGNORE] * len(prompt) + target)[:max_len]
    return tokens, labels


def collate(batch: list[tuple[list[int], list[int]]]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(tokens) for tokens, _ in batch)
    token_rows, label_rows = [], []
    for tokens, labels in batch:
        pad = width - len(tokens)
        token_rows.append(tokens + [PAD] * pad)
        label_rows.append(labels + [IGNORE] * pad)
    return torch.tensor(token_rows, dtype=torch.long), torch.tensor(label_rows, dtype=torch.long)

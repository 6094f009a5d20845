"""Fine-tuning jobs: primary learning from scratch-config base weights, or
enhanced learning initialized from a primary-learning checkpoint.

Loss is next-token cross entropy over the output span only (input masked).
Defaults mirror the reference setup: adapter rank 32 and 10 epochs for
primary learning; enhanced learning drops to 3 epochs at batch size 8, since
the concatenated knowledge makes inputs longer. Every logged step goes to a
line-delimited training log next to the checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import collate, encode_example, load_training_file
from .lora import apply_lora, trainable_parameters
from .model import ModelConfig, TinyCausalLM, load_checkpoint, output_span_loss, save_checkpoint

STAGES = ("primary_learning", "enhanced_learning")


class JobError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float = 2e-4
    epochs: int = 10
    batch_size: int = 8
    adapter_rank: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.adapter_rank < 1:
            raise JobError("epochs, batch_size, and adapter_rank must be >= 1")
        if self.learning_rate <= 0:
            raise JobError("learning_rate must be > 0")


def stage_defaults(stage: str) -> Hyperparameters:
    if stage == "enhanced_learning":
        return Hyperparameters(epochs=3, batch_size=8)
    return Hyperparameters()


@dataclass(frozen=True)
class TrainerJob:
    stage: str
    training_file: str
    output_dir: str
    base_checkpoint: str | None = None  # primary-learning checkpoint for S_E
    model: ModelConfig = field(default_factory=ModelConfig)
    hyperparameters: Hyperparameters | None = None
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise JobError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.stage == "enhanced_learning" and not self.base_checkpoint:
            raise JobError("enhanced_learning must reference a primary-learning checkpoint")

    def resolved_hyperparameters(self) -> Hyperparameters:
        return self.hyperparameters or stage_defaults(self.stage)


def train(job: TrainerJob) -> Path:
    """Run the job; returns the checkpoint directory (training_log.jsonl inside).

    The training file is fully validated before any model is built: a schema
    mismatch aborts the job untrained.
    """
    rows = load_training_file(job.training_file)
    hp = job.resolved_hyperparameters()
    torch.manual_seed(job.seed)

    if job.base_checkpoint:
        model, metadata = load_checkpoint(job.base_checkpoint)
        if not metadata.get("lora_rank"):
            raise JobError(f"{job.base_checkpoint}: not an adapter checkpoint")
    else:
        model = TinyCausalLM(job.model)
        apply_lora(model, rank=hp.adapter_rank)

    parameters = trainable_parameters(model)
    optimizer = torch.optim.AdamW(parameters, lr=hp.learning_rate)
    encoded = [encode_example(row, model.cfg.max_len) for row in rows]

    out_dir = Path(job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "training_log.jsonl"
    step = 0
    model.train()
    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(hp.epochs):
            for start in range(0, len(encoded), hp.batch_size):
                tokens, labels = collate(encoded[start:start + hp.batch_size])
                optimizer.zero_grad()
                loss = output_span_loss(model(tokens), labels)
                loss.backward()
                optimizer.step()
                step += 1
                if step % job.log_every == 0:
                    log.write(json.dumps({
                        "step": step,
                        "epoch": epoch,
                        "loss": float(loss.item()),
                        "lr": hp.learning_rate,
                    }) + "\n")

    rank = (
        metadata["lora_rank"] if job.base_checkpoint else hp.adapter_rank  # noqa: F821
    )
    save_checkpoint(
        model,
        out_dir,
        {
            "stage": job.stage,
            "lora_rank": rank,
            "lora_alpha": float(2 * rank),
            "trained_on": str(job.training_file),
            "rows": len(rows),
            "epochs": hp.epochs,
            "batch_size": hp.batch_size,
            "learning_rate": hp.learning_rate,
            "initialized_from": job.base_checkpoint,
        },
    )
    return out_dir


def read_training_log(directory: str | Path) -> list[dict]:
    path = Path(directory) / "training_log.jsonl"
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]

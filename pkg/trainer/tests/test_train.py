import json

import pytest
import torch
import torch.nn.functional as F

from nesycd_trainer.data import IGNORE, SchemaError, collate, encode_example, load_training_file
from nesycd_trainer.lora import LoRALinear, apply_lora, trainable_parameters
from nesycd_trainer.model import (
    ModelConfig,
    TinyCausalLM,
    load_checkpoint,
    output_span_loss,
    save_checkpoint,
)
from nesycd_trainer.train import (
    Hyperparameters,
    JobError,
    TrainerJob,
    read_training_log,
    stage_defaults,
    train,
)

SMOKE_HP = Hyperparameters(learning_rate=3e-3, epochs=1, batch_size=8, adapter_rank=8)


def test_defaults_mirror_reference_table():
    hp = stage_defaults("primary_learning")
    assert hp.adapter_rank == 32
    assert hp.epochs == 10
    enhanced = stage_defaults("enhanced_learning")
    assert enhanced.epochs == 3 and enhanced.batch_size == 8


def test_enhanced_learning_requires_base_checkpoint(tmp_path):
    with pytest.raises(JobError, match="primary-learning checkpoint"):
        TrainerJob(stage="enhanced_learning", training_file="f", output_dir=str(tmp_path))


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(JobError, match="stage"):
        TrainerJob(stage="warmup", training_file="f", output_dir=str(tmp_path))


def test_schema_mismatch_aborts_before_training(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"prompt": "p", "completion": "c"}) + "\n", encoding="utf-8")
    job = TrainerJob("primary_learning", str(bad), str(tmp_path / "ckpt"))
    with pytest.raises(SchemaError):
        train(job)
    assert not (tmp_path / "ckpt").exists(), "no checkpoint may be written"


def test_output_span_loss_matches_hand_masked_ce():
    torch.manual_seed(0)
    model = TinyCausalLM(ModelConfig(dim=32, n_heads=2, n_layers=1, max_len=64))
    rows = [
        encode_example(r, 64)
        for r in load_rows()
    ]
    tokens, labels = collate(rows)
    logits = model(tokens)
    loss = output_span_loss(logits, labels)

    total, count = 0.0, 0
    for b in range(tokens.shape[0]):
        for t in range(tokens.shape[1] - 1):
            target = int(labels[b, t + 1])
            if target == IGNORE:
                continue
            total += F.cross_entropy(logits[b, t][None], torch.tensor([target])).item()
            count += 1
    assert count > 0
    assert loss.item() == pytest.approx(total / count, rel=1e-5)


def load_rows():
    from nesycd_trainer.data import TrainingRow

    return [
        TrainingRow("STD", "ab", "xy", "s1"),
        TrainingRow("AP", "q", "7", "s2"),
    ]


def test_lora_starts_identical_and_freezes_base():
    torch.manual_seed(0)
    base = torch.nn.Linear(8, 8)
    x = torch.randn(3, 8)
    before = base(x)
    wrapped = LoRALinear(base, rank=4, alpha=8.0)
    torch.testing.assert_close(wrapped(x), before)
    assert wrapped.base.weight.requires_grad is False
    assert wrapped.lora_a.requires_grad and wrapped.lora_b.requires_grad


def test_apply_lora_trains_only_adapters():
    model = TinyCausalLM(ModelConfig(dim=32, n_heads=2, n_layers=1, max_len=64))
    wrapped = apply_lora(model, rank=4)
    assert any("q_proj" in name for name in wrapped)
    assert any("head" in name for name in wrapped)
    trainable = trainable_parameters(model)
    assert trainable
    assert all("lora_" in name for name, p in model.named_parameters() if p.requires_grad)


def test_smoke_one_epoch_loss_decreases(training_file, tmp_path):
    job = TrainerJob(
        stage="primary_learning",
        training_file=str(training_file),
        output_dir=str(tmp_path / "ckpt"),
        model=ModelConfig(dim=64, n_heads=2, n_layers=2, max_len=256),
        hyperparameters=SMOKE_HP,
    )
    out = train(job)
    log = read_training_log(out)
    assert len(log) == 13  # 100 rows / batch 8
    assert log[-1]["loss"] < log[0]["loss"], "loss must decrease over the epoch"
    assert (out / "weights.pt").exists()
    config = json.loads((out / "config.json").read_text())
    assert config["stage"] == "primary_learning"
    assert config["rows"] == 100


def test_enhanced_learning_resumes_from_primary(training_file, tmp_path):
    primary = train(
        TrainerJob(
            "primary_learning", str(training_file), str(tmp_path / "sp"),
            model=ModelConfig(dim=32, n_heads=2, n_layers=1, max_len=256),
            hyperparameters=SMOKE_HP,
        )
    )
    enhanced = train(
        TrainerJob(
            "enhanced_learning", str(training_file), str(tmp_path / "se"),
            base_checkpoint=str(primary),
            hyperparameters=Hyperparameters(learning_rate=3e-3, epochs=1, batch_size=8),
        )
    )
    metadata = json.loads((enhanced / "config.json").read_text())
    assert metadata["stage"] == "enhanced_learning"
    assert metadata["initialized_from"] == str(primary)
    log = read_training_log(enhanced)
    assert log and all(l["loss"] == l["loss"] for l in log)  # finite


def test_enhanced_learning_rejects_non_adapter_checkpoint(training_file, tmp_path):
    model = TinyCausalLM(ModelConfig(dim=32, n_heads=2, n_layers=1, max_len=64))
    save_checkpoint(model, tmp_path / "plain", {"stage": "x"})
    job = TrainerJob(
        "enhanced_learning", str(training_file), str(tmp_path / "out"),
        base_checkpoint=str(tmp_path / "plain"),
    )
    with pytest.raises(JobError, match="adapter"):
        train(job)


def test_checkpoint_round_trip_same_logits(training_file, tmp_path):
    out = train(
        TrainerJob(
            "primary_learning", str(training_file), str(tmp_path / "ckpt"),
            model=ModelConfig(dim=32, n_heads=2, n_layers=1, max_len=128),
            hyperparameters=SMOKE_HP,
        )
    )
    first, _ = load_checkpoint(out)
    second, _ = load_checkpoint(out)
    tokens = torch.tensor([[256, 97, 98, 99]], dtype=torch.long)
    torch.testing.assert_close(first(tokens), second(tokens))


def test_hyperparameter_validation():
    with pytest.raises(JobError):
        Hyperparameters(epochs=0)
    with pytest.raises(JobError):
        Hyperparameters(learning_rate=0.0)
    with pytest.raises(JobError):
        Hyperparameters(adapter_rank=0)

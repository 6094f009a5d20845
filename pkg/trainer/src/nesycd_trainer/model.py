"""A small byte-level causal transformer, plus checkpoint save/load.

Self-contained on purpose: smoke-scale training must run on CPU in seconds
and serving must not depend on any model hub. The architecture is a plain
pre-norm transformer decoder with learned positional embeddings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import IGNORE, VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    dim: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_len: int = 512


class CausalSelfAttention(nn.Module):
    """Multi-head self-attention with separate q/k/v/out linears so adapters
    can wrap each projection individually."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.dim % cfg.n_heads:
            raise ValueError("dim must divide evenly into heads")
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.dim // cfg.n_heads
        self.q_proj = nn.Linear(cfg.dim, cfg.dim)
        self.k_proj = nn.Linear(cfg.dim, cfg.dim)
        self.v_proj = nn.Linear(cfg.dim, cfg.dim)
        self.out_proj = nn.Linear(cfg.dim, cfg.dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, seq_len, dim = x.shape
        shape = (batch, seq_len, self.n_heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.out_proj(out.transpose(1, 2).reshape(batch, seq_len, dim))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.dim, 4 * cfg.dim),
            nn.GELU(),
            nn.Linear(4 * cfg.dim, cfg.dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TinyCausalLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        _, seq_len = tokens.shape
        if seq_len > self.cfg.max_len:
            raise ValueError(f"sequence length {seq_len} exceeds max_len {self.cfg.max_len}")
        positions = torch.arange(seq_len, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(positions)[None, :, :]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


def output_span_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Next-token cross entropy over output-span positions only.

    Position t predicts labels[t + 1]; masked (IGNORE) labels — the input
    span and padding — contribute nothing to the loss.
    """
    shifted_logits = logits[:, :-1, :].reshape(-1, logits.size(-1))
    shifted_labels = labels[:, 1:].reshape(-1)
    return F.cross_entropy(shifted_logits, shifted_labels, ignore_index=IGNORE)


@torch.no_grad()
def greedy_decode(
    model: TinyCausalLM,
    prompt_tokens: list[int],
    max_new_tokens: int,
    eos: int,
    top_k: int = 0,
) -> tuple[list[int], list[list[tuple[int, float]]]]:
    """Greedy continuation with optional per-step top-k (token, logprob) lists."""
    model.eval()
    device = next(model.parameters()).device
    tokens = list(prompt_tokens)
    steps: list[list[tuple[int, float]]] = []
    budget = min(max_new_tokens, model.cfg.max_len - len(tokens))
    for _ in range(max(0, budget)):
        window = torch.tensor([tokens[-model.cfg.max_len:]], dtype=torch.long, device=device)
        logits = model(window)[0, -1]
        logprobs = F.log_softmax(logits, dim=-1)
        next_token = int(torch.argmax(logprobs).item())
        if top_k > 0:
            values, indices = torch.topk(logprobs, k=min(top_k, logprobs.numel()))
            steps.append([(int(i), float(v)) for i, v in zip(indices, values)])
        tokens.append(next_token)
        if next_token == eos:
            break
    return tokens[len(prompt_tokens):], steps


def save_checkpoint(model: TinyCausalLM, directory: str | Path, metadata: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(
        json.dumps({"model": asdict(model.cfg), **metadata}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    torch.save(model.state_dict(), directory / "weights.pt")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[TinyCausalLM, dict]:
    directory = Path(directory)
    document = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    cfg = ModelConfig(**document["model"])
    metadata = {k: v for k, v in document.items() if k != "model"}
    model = TinyCausalLM(cfg)
    if metadata.get("lora_rank"):
        from .lora import apply_lora

        apply_lora(model, rank=metadata["lora_rank"], alpha=metadata.get("lora_alpha", 0.0))
    state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return model, metadata

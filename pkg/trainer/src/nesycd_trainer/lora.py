"""Low-rank adapters over the model's linear layers.

The base weights are frozen; each wrapped linear adds a trainable
(alpha / r) * B @ A @ x correction with B zero-initialized, so the wrapped
model starts exactly equal to the base model. Only adapter parameters (and
nothing else) receive gradients.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        self.rank = rank
        self.scale = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * torch.nn.functional.linear(
            torch.nn.functional.linear(x, self.lora_a), self.lora_b
        )


def apply_lora(model: nn.Module, rank: int, alpha: float | None = None) -> list[str]:
    """Freeze the model and wrap every linear projection with adapters.

    Covers q/k/v/out attention projections, both MLP linears, and the output
    head; returns the qualified names of the wrapped modules. Base weights
    and embeddings stay frozen.
    """
    alpha = float(2 * rank) if alpha is None else alpha
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    wrapped: list[str] = []
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            if isinstance(child, nn.Linear):
                setattr(module, child_name, LoRALinear(child, rank, alpha))
                wrapped.append(f"{name}.{child_name}" if name else child_name)
    return wrapped


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]

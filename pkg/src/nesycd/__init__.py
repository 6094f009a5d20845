"""Rationale distillation toolchain with a curated knowledge base and
confidence-gated retrieval."""

__version__ = "0.1.0"

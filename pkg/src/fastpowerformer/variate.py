"""Variate tokens: each channel's whole trajectory becomes one attention token."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .tensor import ShapeError, Tensor, add, matmul, transpose_axes

__all__ = ["VariateTokens", "transpose_input", "tokenize_trajectories", "cross_variable_attention"]


@dataclass
class VariateTokens:
    tokens: Tensor  # (B, C, d_model)
    source_len: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3:
            raise ShapeError(f"variate tokens must be (B, C, d_model), got {self.tokens.shape}")
        if self.n_tokens > self.source_len:
            raise ShapeError(f"{self.n_tokens} channel tokens exceed trajectory length {self.source_len}")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


def transpose_input(x: Tensor) -> Tensor:
    """(B, T, C) -> (B, C, T)."""
    if x.ndim != 3:
        raise ShapeError(f"transpose_input expects a rank-3 tensor, got shape {x.shape}")
    return transpose_axes(x, (0, 2, 1))


def tokenize_trajectories(x: Tensor, W: Tensor, b: Tensor) -> VariateTokens:
    """Embed each length-T channel trajectory of a (B, C, T) tensor to d_model."""
    if x.ndim != 3 or W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"trajectory length {x.shape[-1:]} does not match embedding weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"bias {b.shape} must be ({W.shape[1]},)")
    return VariateTokens(add(matmul(x, W), b), x.shape[-1])


def cross_variable_attention(tokens: VariateTokens, attn: Callable[[Tensor], Tensor]) -> VariateTokens:
    """Run a shape-preserving attention function over the channel-token axis."""
    out = attn(tokens.tokens)
    if out.shape[:2] != tokens.tokens.shape[:2]:
        raise ShapeError(f"attention changed token layout {tokens.tokens.shape} -> {out.shape}")
    return VariateTokens(out, tokens.source_len)

"""Reversible residual layers with a chunked position-wise feed-forward.

A layer maps halves ``(x1, x2)`` to ``y1 = x1 + F(x2)``, ``y2 = x2 + G(y1)``.
Because the map is invertible, :func:`reversible_stack` can drop every
intermediate activation during the forward pass and rebuild them layer by
layer while backpropagating.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .attention import dense_attention, lsh_attention
from .nn import Module, glorot
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    concat,
    current_tape,
    custom_op,
    layer_norm,
    matmul,
    mul,
    no_tape,
    relu,
    rowwise_linear,
    slice_axis,
)
from .tensor import sum as tsum

__all__ = [
    "RevBlockState",
    "rev_forward",
    "rev_inverse",
    "chunk_bounds",
    "chunked_ffn",
    "AttentionSublayer",
    "FeedForward",
    "RevLayer",
    "reversible_stack",
]

SubFunction = Callable[[Tensor], Tensor]


@dataclass
class RevBlockState:
    x1: Tensor
    x2: Tensor

    def __post_init__(self) -> None:
        if self.x1.shape != self.x2.shape:
            raise ShapeError(f"halves differ in shape: {self.x1.shape} vs {self.x2.shape}")

    @classmethod
    def split(cls, x: Tensor) -> "RevBlockState":
        width = x.shape[-1]
        if width % 2:
            raise ShapeError(f"feature width must be even to split, got {width}")
        half = width // 2
        return cls(slice_axis(x, -1, 0, half), slice_axis(x, -1, half, width))

    def merge(self) -> Tensor:
        return concat([self.x1, self.x2], axis=-1)


def rev_forward(state: RevBlockState, attn: SubFunction, ffn: SubFunction) -> RevBlockState:
    y1 = state.x1 + attn(state.x2)
    y2 = state.x2 + ffn(y1)
    return RevBlockState(y1, y2)


def rev_inverse(output: RevBlockState, attn: SubFunction, ffn: SubFunction) -> RevBlockState:
    x2 = output.x2 - ffn(output.x1)
    x1 = output.x1 - attn(x2)
    return RevBlockState(x1, x2)


def chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    """Partition ``range(n)`` into consecutive slices of at most ``chunk``."""
    if not 1 <= chunk <= n:
        raise ValueError(f"chunk must lie in [1, {n}], got {chunk}")
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def chunked_ffn(x: Tensor, chunk: int, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """relu(x w1 + b1) w2 + b2, evaluated ``chunk`` tokens at a time along axis 1.

    The output does not depend on ``chunk`` down to the last bit.
    """
    if x.ndim != 3:
        raise ShapeError(f"chunked_ffn expects (B, N, d), got {x.shape}")
    parts = []
    for lo, hi in chunk_bounds(x.shape[1], chunk):
        piece = x if (lo, hi) == (0, x.shape[1]) else slice_axis(x, 1, lo, hi)
        parts.append(rowwise_linear(relu(rowwise_linear(piece, w1, b1)), w2, b2))
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


class AttentionSublayer(Module):
    """Pre-norm single-head self-attention with shared query/key projection."""

    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        *,
        kind: str = "lsh",
        n_buckets: int = 4,
        n_rounds: int = 4,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if kind not in ("lsh", "dense"):
            raise ValueError(f"attention kind must be 'lsh' or 'dense', got {kind!r}")
        self.kind = kind
        self.n_buckets = n_buckets
        self.n_rounds = n_rounds
        self.seed = seed
        self.ln_g = self.add_param("ln_g", np.ones(width))
        self.ln_b = self.add_param("ln_b", np.zeros(width))
        self.w_qk = self.add_param("w_qk", glorot(rng, width, width))
        self.w_v = self.add_param("w_v", glorot(rng, width, width))
        self.w_o = self.add_param("w_o", glorot(rng, width, width))

    def __call__(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln_g, self.ln_b)
        qk = matmul(h, self.w_qk)
        v = matmul(h, self.w_v)
        if self.kind == "dense":
            out = dense_attention(qk, qk, v)
        else:
            out = lsh_attention(qk, qk, v, self.n_buckets, self.n_rounds, self.seed)
        return matmul(out, self.w_o)


class FeedForward(Module):
    """Pre-norm position-wise two-layer network evaluated in token chunks."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, chunk: Optional[int] = None) -> None:
        super().__init__()
        self.chunk = chunk
        self.ln_g = self.add_param("ln_g", np.ones(width))
        self.ln_b = self.add_param("ln_b", np.zeros(width))
        self.w1 = self.add_param("w1", glorot(rng, width, hidden))
        self.b1 = self.add_param("b1", np.zeros(hidden))
        self.w2 = self.add_param("w2", glorot(rng, hidden, width))
        self.b2 = self.add_param("b2", np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln_g, self.ln_b)
        n = x.shape[1]
        chunk = n if self.chunk is None else min(self.chunk, n)
        return chunked_ffn(h, chunk, self.w1, self.b1, self.w2, self.b2)


class RevLayer(Module):
    def __init__(self, attn: SubFunction, ffn: SubFunction) -> None:
        super().__init__()
        self.attn = attn
        self.ffn = ffn
        if isinstance(attn, Module):
            self.add_child("attn", attn)
        if isinstance(ffn, Module):
            self.add_child("ffn", ffn)

    def forward(self, state: RevBlockState) -> RevBlockState:
        return rev_forward(state, self.attn, self.ffn)

    def inverse(self, state: RevBlockState) -> RevBlockState:
        return rev_inverse(state, self.attn, self.ffn)


def _run(x: Tensor, layers: Sequence[RevLayer]) -> Tensor:
    state = RevBlockState.split(x)
    for layer in layers:
        state = layer.forward(state)
    return state.merge()


def reversible_stack(x: Tensor, layers: Sequence[RevLayer], reconstruct: bool = True) -> Tensor:
    """Apply reversible layers to a (B, N, d_model) hidden state.

    With ``reconstruct`` the forward pass keeps no activations on the tape;
    the backward rule walks the layers in reverse, recovering each layer's
    input by inversion and re-running just that layer under a private tape.
    Without it every intermediate is recorded as usual.
    """
    tape = current_tape()
    if not reconstruct or tape is None:
        return _run(x, layers)
    params = [p for layer in layers for p in layer.parameters()]
    with no_tape():
        y = _run(x, layers).data

    def back(g: np.ndarray):
        half = g.shape[-1] // 2
        g1, g2 = g[..., :half], g[..., half:]
        state = RevBlockState(Tensor(y[..., :half]), Tensor(y[..., half:]))
        pgrads: dict[int, np.ndarray] = {}
        for layer in reversed(layers):
            with no_tape():
                state = layer.inverse(state)
            with Tape() as sub:
                x1, x2 = Tensor(state.x1.data), Tensor(state.x2.data)
                lp = layer.parameters()
                sub.watch(x1, x2, lp)
                out = layer.forward(RevBlockState(x1, x2))
                surrogate = tsum(mul(out.x1, g1)) + tsum(mul(out.x2, g2))
                grads = sub.backward(surrogate)
            g1, g2 = grads[x1], grads[x2]
            for p in lp:
                pgrads[id(p)] = pgrads[id(p)] + grads[p] if id(p) in pgrads else grads[p]
            del sub, out, surrogate, grads
            state = RevBlockState(x1, x2)
        return (np.concatenate([g1, g2], axis=-1),) + tuple(pgrads.get(id(p)) for p in params)

    return custom_op(y, (x, *params), back, "reversible_stack")

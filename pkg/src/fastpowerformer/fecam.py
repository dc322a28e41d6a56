"""Frequency-enhanced channel attention built on an orthonormal DCT-II.

Each channel is transformed to the cosine domain, a two-layer gate turns its
spectrum into a weight in (0, 1), and the channel is rescaled, added back to
itself and layer-normalised.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .nn import Module
from .tensor import ShapeError, Tensor, add, layer_norm, matmul, mul, relu, sigmoid

__all__ = ["DctBasis", "dct_basis", "dct_channel", "dct_stack", "FecamParams", "channel_gate", "fecam_apply", "Fecam"]


@dataclass(frozen=True)
class DctBasis:
    """Row ``l`` of ``matrix`` is the l-th orthonormal DCT-II basis vector."""

    matrix: np.ndarray
    length: int


@lru_cache(maxsize=None)
def dct_basis(length: int) -> DctBasis:
    if length < 1:
        raise ValueError(f"DCT length must be positive, got {length}")
    n = np.arange(length)
    m = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * length))
    m[0] *= np.sqrt(1.0 / length)
    m[1:] *= np.sqrt(2.0 / length)
    m.flags.writeable = False
    return DctBasis(m, length)


def dct_channel(v: Tensor, basis: DctBasis) -> Tensor:
    """Cosine coefficients of a single (1, L) channel."""
    if v.ndim != 2 or v.shape[0] != 1 or v.shape[1] != basis.length:
        raise ShapeError(f"expected a (1, {basis.length}) channel, got {v.shape}")
    return matmul(v, Tensor(basis.matrix.T))


def dct_stack(x: Tensor, basis: DctBasis) -> Tensor:
    """Per-(batch, channel) DCT of a (B, C, L) tensor."""
    if x.ndim != 3 or x.shape[-1] != basis.length:
        raise ShapeError(f"last axis of {x.shape} does not match DCT length {basis.length}")
    return matmul(x, Tensor(basis.matrix.T))


@dataclass
class FecamParams:
    W1: Tensor  # (L, d_int)
    W2: Tensor  # (d_int, 1)
    gamma: Tensor
    beta: Tensor

    def __post_init__(self) -> None:
        L, d_int = self.W1.shape
        if d_int < 1 or self.W2.shape != (d_int, 1):
            raise ShapeError(f"W2 must be ({d_int}, 1), got {self.W2.shape}")
        if self.gamma.shape != (L,) or self.beta.shape != (L,):
            raise ShapeError(f"norm affine must be ({L},)")


def channel_gate(freq: Tensor, params: FecamParams) -> Tensor:
    """sigmoid(relu(freq W1) W2): one weight per (batch, channel)."""
    if freq.ndim != 3 or freq.shape[-1] != params.W1.shape[0]:
        raise ShapeError(f"spectrum {freq.shape} does not match W1 {params.W1.shape}")
    return sigmoid(matmul(relu(matmul(freq, params.W1)), params.W2))


def fecam_apply(x: Tensor, params: FecamParams, basis: DctBasis, gate_override: Optional[np.ndarray] = None) -> Tensor:
    """LayerNorm(x + x * gate(DCT(x))).

    Mean and variance are pooled over channels and positions together: a
    per-channel gate rescales a whole row, which a norm over the last axis
    alone would undo.  ``gate_override`` substitutes a fixed (B, C, 1) gate.
    """
    gate = channel_gate(dct_stack(x, basis), params) if gate_override is None else Tensor(gate_override)
    return layer_norm(add(x, mul(x, gate)), params.gamma, params.beta, stat_axes=(-2, -1))


class Fecam(Module):
    def __init__(self, length: int, d_int: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.basis = dct_basis(length)
        w1 = self.add_param("W1", rng.normal(0.0, np.sqrt(2.0 / length), size=(length, d_int)))
        w2 = self.add_param("W2", rng.normal(0.0, np.sqrt(1.0 / d_int), size=(d_int, 1)))
        g = self.add_param("gamma", np.ones(length))
        b = self.add_param("beta", np.zeros(length))
        self.params = FecamParams(w1, w2, g, b)

    def __call__(self, x: Tensor) -> Tensor:
        return fecam_apply(x, self.params, self.basis)

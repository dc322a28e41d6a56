"""Single-layer LSTM over the time axis plus the projection to model width.

:func:`lstm_step` is the readable gate-by-gate cell built from tensor ops;
:func:`lstm_sequence` runs the whole recurrence as one fused tape entry
backed by the compiled kernels (or their numpy fallback).
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import _kernels
from .nn import Module
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    current_tape,
    custom_op,
    matmul,
    mul,
    sigmoid,
    tanh,
    transpose_axes,
)

__all__ = ["LstmParams", "LstmState", "lstm_step", "lstm_sequence", "embed_project", "LstmEmbedding"]


@dataclass
class LstmParams:
    """Gate weights of shape (d_h, V + d_h) acting on ``[x_t, h_{t-1}]``."""

    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_c: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_c: Tensor

    def __post_init__(self) -> None:
        d_h, width = self.W_f.shape
        for w in (self.W_i, self.W_o, self.W_c):
            if w.shape != (d_h, width):
                raise ShapeError(f"gate weights disagree: {self.W_f.shape} vs {w.shape}")
        for b in (self.b_f, self.b_i, self.b_o, self.b_c):
            if b.shape != (d_h,):
                raise ShapeError(f"gate bias must be ({d_h},), got {b.shape}")
        if width <= d_h:
            raise ShapeError(f"weight width {width} leaves no room for inputs beyond d_h={d_h}")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    @classmethod
    def init(cls, n_inputs: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0) -> "LstmParams":
        bound = 1.0 / np.sqrt(hidden)
        shape = (hidden, n_inputs + hidden)
        ws = [Tensor(rng.uniform(-bound, bound, size=shape), name=f"W_{g}") for g in "fioc"]
        bs = [Tensor(rng.uniform(-bound, bound, size=hidden), name=f"b_{g}") for g in "fioc"]
        bs[0] = Tensor(np.full(hidden, forget_bias), name="b_f")
        return cls(*ws, *bs)

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


def _gate(xh: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(xh, transpose_axes(w, (1, 0))), b)


def lstm_step(x_t: Tensor, state: LstmState, params: LstmParams) -> LstmState:
    """One application of the gated cell update."""
    if x_t.ndim != 2 or x_t.shape[1] != params.n_inputs:
        raise ShapeError(f"x_t must be (B, {params.n_inputs}), got {x_t.shape}")
    if state.h.shape != (x_t.shape[0], params.hidden) or state.c.shape != state.h.shape:
        raise ShapeError(f"state must be ({x_t.shape[0]}, {params.hidden}), got {state.h.shape}/{state.c.shape}")
    xh = concat([x_t, state.h], axis=1)
    f = sigmoid(_gate(xh, params.W_f, params.b_f))
    i = sigmoid(_gate(xh, params.W_i, params.b_i))
    o = sigmoid(_gate(xh, params.W_o, params.b_o))
    cand = tanh(_gate(xh, params.W_c, params.b_c))
    c = add(mul(f, state.c), mul(i, cand))
    return LstmState(mul(o, tanh(c)), c)


def lstm_sequence(x: Tensor, params: LstmParams) -> Tensor:
    """Hidden states for every step of a (B, T, V) input, zero initial state."""
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence expects (B, T, V), got {x.shape}")
    B, T, V = x.shape
    if V != params.n_inputs:
        raise ShapeError(f"input has {V} variables, parameters expect {params.n_inputs}")
    H = params.hidden
    w = concat([params.W_f, params.W_i, params.W_o, params.W_c], axis=0)
    b = concat([params.b_f, params.b_i, params.b_o, params.b_c], axis=0)
    wd = w.data
    wx, wh = wd[:, :V], np.ascontiguousarray(wd[:, V:])
    xd = x.data
    xw = np.einsum("btv,gv->btg", xd, wx) + b.data
    h, gates, c, tc = _kernels.lstm_forward(xw, wh)
    if current_tape() is None:
        return Tensor(h, _copy=False)
    # saved activations are wrapped so the allocation counter sees them
    saved = [Tensor(a, _copy=False) for a in (gates, c, tc)]

    def back(g):
        gt, ct, tct = (s.data for s in saved)
        dz, dwh = _kernels.lstm_backward(g, gt, ct, tct, h, wh)
        dwx = np.einsum("btg,btv->gv", dz, xd)
        dx = np.einsum("btg,gv->btv", dz, wx)
        return dx, np.concatenate([dwx, dwh], axis=1), dz.sum(axis=(0, 1))

    return custom_op(h, (x, w, b), back, "lstm_sequence")


def embed_project(h: Tensor, W_e: Tensor, b_e: Tensor) -> Tensor:
    """Position-wise affine map from LSTM width to model width."""
    if h.ndim != 3 or W_e.ndim != 2 or h.shape[-1] != W_e.shape[0] or b_e.shape != (W_e.shape[1],):
        raise ShapeError(f"cannot project {h.shape} with W_e {W_e.shape} and b_e {b_e.shape}")
    return add(matmul(h, W_e), b_e)


class LstmEmbedding(Module):
    def __init__(self, n_inputs: int, hidden: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.params = LstmParams.init(n_inputs, hidden, rng)
        for name, t in self.params.tensors().items():
            t.name = name
            self._params[name] = t

    def __call__(self, x: Tensor) -> Tensor:
        return lstm_sequence(x, self.params)

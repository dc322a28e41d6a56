"""Compare tape gradients against central differences."""
from __future__ import annotations

import numpy as np

from fastpowerformer.tensor import Tape, Tensor, mul, no_tape
from fastpowerformer.tensor import sum as tsum
from oracles import central_diff, rel_error


def tape_grads(fn, arrays, weight):
    leaves = [Tensor(a) for a in arrays]
    with Tape() as tape:
        tape.watch(leaves)
        loss = tsum(mul(fn(*leaves), Tensor(weight)))
        grads = tape.backward(loss)
    return [grads[t] for t in leaves]


def check(fn, arrays, seed=0, h=1e-6):
    """Worst relative error over all inputs of ``sum(fn(*inputs) * W)``."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with no_tape():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weight = np.random.default_rng(seed).standard_normal(out_shape)
    analytic = tape_grads(fn, arrays, weight)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
            with no_tape():
                return float(np.sum(fn(*args).data * weight))

        worst = max(worst, rel_error(analytic[i], central_diff(f, a, h)))
    return worst


def _inputs(seed, *shapes, low=None):
    r = np.random.default_rng(seed)
    out = []
    for s in shapes:
        a = r.standard_normal(s)
        if low is not None:
            a = np.abs(a) + low
        out.append(a)
    return out


def _away_from_zero(seed, shape):
    a = np.random.default_rng(seed).standard_normal(shape)
    return np.where(np.abs(a) < 0.1, 0.5, a)


def op_cases():
    """(name, fn, inputs) for every differentiable primitive."""
    from fastpowerformer import tensor as T
    from fastpowerformer.attention import BucketAssignment, dense_attention, lsh_attention
    from fastpowerformer.fecam import FecamParams, channel_gate, dct_basis, dct_stack, fecam_apply
    from fastpowerformer.lstm import LstmParams, lstm_sequence, lstm_step, LstmState
    from fastpowerformer.revnet import chunked_ffn

    mask = np.random.default_rng(9).random((3, 4)) < 0.3
    codes = [BucketAssignment(2, 4, np.random.default_rng(s).integers(0, 4, (2, 6))) for s in (1, 2)]

    def lstm_fn(x, w, b):
        H = w.shape[0] // 4
        ws = [T.slice_axis(w, 0, i * H, (i + 1) * H) for i in range(4)]
        bs = [T.slice_axis(b, 0, i * H, (i + 1) * H) for i in range(4)]
        return lstm_sequence(x, LstmParams(*ws, *bs))

    def lstm_step_fn(x, h, c, w, b):
        H = h.shape[1]
        ws = [T.slice_axis(w, 0, i * H, (i + 1) * H) for i in range(4)]
        bs = [T.slice_axis(b, 0, i * H, (i + 1) * H) for i in range(4)]
        s = lstm_step(x, LstmState(h, c), LstmParams(*ws, *bs))
        return T.concat([s.h, s.c], axis=1)

    basis = dct_basis(6)
    return [
        ("add_broadcast", T.add, _inputs(0, (3, 4), (4,))),
        ("sub", T.sub, _inputs(1, (2, 3), (2, 3))),
        ("mul_broadcast", T.mul, _inputs(2, (2, 3, 4), (3, 1))),
        ("div", T.div, _inputs(3, (3, 4)) + _inputs(4, (3, 4), low=0.5)),
        ("neg", T.neg, _inputs(5, (5,))),
        ("square", T.square, _inputs(6, (2, 5))),
        ("exp", T.exp, _inputs(7, (3, 3))),
        ("sigmoid", T.sigmoid, _inputs(8, (4, 3))),
        ("tanh", T.tanh, _inputs(9, (4, 3))),
        ("relu", T.relu, [_away_from_zero(10, (4, 5))]),
        ("masked_fill", lambda a: T.masked_fill(a, mask, -2.0), _inputs(11, (3, 4))),
        ("matmul_batched", T.matmul, _inputs(12, (2, 3, 4), (4, 5))),
        ("matmul_2d", T.matmul, _inputs(13, (3, 4), (4, 2))),
        ("rowwise_linear", T.rowwise_linear, _inputs(14, (2, 3, 4), (4, 5), (5,))),
        ("transpose_axes", lambda a: T.transpose_axes(a, (2, 0, 1)), _inputs(15, (2, 3, 4))),
        ("swapaxes", lambda a: T.swapaxes(a, 0, -1), _inputs(16, (2, 3, 4))),
        ("reshape", lambda a: T.reshape(a, (6, 4)), _inputs(17, (2, 3, 4))),
        ("concat", lambda a, b: T.concat([a, b], axis=1), _inputs(18, (2, 3), (2, 5))),
        ("slice_axis", lambda a: T.slice_axis(a, 1, 1, 3), _inputs(19, (2, 4, 3))),
        ("sum_axis", lambda a: T.sum(a, axis=1, keepdims=True), _inputs(20, (3, 4, 2))),
        ("mean", lambda a: T.mean(a, axis=0), _inputs(21, (3, 4))),
        ("softmax", lambda a: T.softmax(a, axis=-1), _inputs(22, (3, 5))),
        ("layer_norm", T.layer_norm, _inputs(23, (2, 3, 6), (6,), (6,))),
        ("dense_attention", dense_attention, _inputs(24, (2, 6, 4), (2, 6, 4), (2, 6, 3))),
        ("lsh_attention", lambda q, k, v: lsh_attention(q, k, v, assignments=codes),
         _inputs(25, (2, 6, 4), (2, 6, 4), (2, 6, 3))),
        ("chunked_ffn", lambda x, w1, b1, w2, b2: chunked_ffn(x, 2, w1, b1, w2, b2),
         [_away_from_zero(26, (2, 5, 3))] + _inputs(27, (3, 4), (4,), (4, 3), (3,))),
        ("lstm_step", lstm_step_fn, _inputs(28, (2, 3), (2, 4), (2, 4), (16, 7), (16,))),
        ("lstm_sequence", lstm_fn, _inputs(29, (2, 5, 3), (16, 7), (16,))),
        ("dct_stack", lambda x: dct_stack(x, basis), _inputs(30, (2, 3, 6))),
        ("channel_gate", lambda f, w1, w2: channel_gate(f, FecamParams(w1, w2, T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)))),
         _inputs(31, (2, 3, 6), (6, 4), (4, 1))),
        ("fecam_apply", lambda x, w1, w2, g, b: fecam_apply(x, FecamParams(w1, w2, g, b), basis),
         _inputs(32, (2, 3, 6), (6, 4), (4, 1), (6,), (6,))),
    ]

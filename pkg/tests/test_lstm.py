import numpy as np
import pytest

from fastpowerformer.lstm import LstmEmbedding, LstmParams, LstmState, embed_project, lstm_sequence, lstm_step
from fastpowerformer.tensor import ShapeError, Tape, Tensor, mean, square

import oracles


def test_step_matches_oracle_first_step():
    r = np.random.default_rng(0)
    p = LstmParams.init(3, 4, r)
    x = r.standard_normal((2, 1, 3))
    s = lstm_step(Tensor(x[:, 0]), LstmState.zeros(2, 4), p)
    want = oracles.lstm_loop(x, *(t.data for t in p.tensors().values()))[:, 0]
    np.testing.assert_allclose(s.h.data, want, rtol=0, atol=1e-14)


def test_sequence_equals_repeated_steps(kernel_backend):
    r = np.random.default_rng(1)
    p = LstmParams.init(3, 5, r)
    x = r.standard_normal((2, 6, 3))
    state = LstmState.zeros(2, 5)
    hs = []
    for t in range(6):
        state = lstm_step(Tensor(x[:, t]), state, p)
        hs.append(state.h.data)
    np.testing.assert_allclose(lstm_sequence(Tensor(x), p).data, np.stack(hs, 1), rtol=0, atol=1e-13)


def test_fused_gradients_equal_stepwise_gradients(kernel_backend):
    r = np.random.default_rng(2)
    p = LstmParams.init(2, 3, r)
    x = Tensor(r.standard_normal((2, 5, 2)))
    leaves = [x, *p.tensors().values()]

    def grads(fused):
        with Tape() as tape:
            tape.watch(leaves)
            if fused:
                h = lstm_sequence(x, p)
            else:
                from fastpowerformer.tensor import concat, reshape, slice_axis

                state = LstmState.zeros(2, 3)
                outs = []
                for t in range(5):
                    xt = reshape(slice_axis(x, 1, t, t + 1), (2, 2))
                    state = lstm_step(xt, state, p)
                    outs.append(reshape(state.h, (2, 1, 3)))
                h = concat(outs, axis=1)
            g = tape.backward(mean(square(h)))
        return [g[t] for t in leaves]

    for a, b in zip(grads(True), grads(False)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_hidden_state_bounded():
    r = np.random.default_rng(3)
    p = LstmParams.init(4, 6, r)
    h = lstm_sequence(Tensor(50 * r.standard_normal((3, 20, 4))), p).data
    assert np.all(np.abs(h) < 1)


def test_forget_bias_initialised_to_one():
    p = LstmParams.init(2, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(p.b_f.data, np.ones(3))


def test_param_shape_validation():
    p = LstmParams.init(2, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        LstmParams(p.W_f, p.W_i, p.W_o, Tensor(np.ones((3, 4))), p.b_f, p.b_i, p.b_o, p.b_c)
    with pytest.raises(ShapeError):
        LstmParams(p.W_f, p.W_i, p.W_o, p.W_c, Tensor(np.ones(2)), p.b_i, p.b_o, p.b_c)


def test_input_width_checked():
    p = LstmParams.init(2, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        lstm_sequence(Tensor(np.ones((1, 4, 3))), p)
    with pytest.raises(ShapeError):
        lstm_step(Tensor(np.ones((1, 3))), LstmState.zeros(1, 3), p)


def test_embed_project_shapes():
    h = Tensor(np.ones((2, 5, 3)))
    out = embed_project(h, Tensor(np.ones((3, 8))), Tensor(np.zeros(8)))
    assert out.shape == (2, 5, 8)
    with pytest.raises(ShapeError):
        embed_project(h, Tensor(np.ones((4, 8))), Tensor(np.zeros(8)))


def test_module_exposes_named_params():
    m = LstmEmbedding(3, 4, np.random.default_rng(0))
    names = [n for n, _ in m.named_parameters()]
    assert names == ["W_f", "W_i", "W_o", "W_c", "b_f", "b_i", "b_o", "b_c"]
    assert m(Tensor(np.ones((1, 7, 3)))).shape == (1, 7, 4)

"""Pure-numpy reference kernels; the compiled module mirrors these signatures."""
from __future__ import annotations

import numpy as np


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_forward(xw: np.ndarray, wh: np.ndarray):
    """Run the gated recurrence over time.

    ``xw`` is the input contribution ``x_t W_x^T + b`` for every step, shape
    (B, T, 4H) with gate blocks ordered forget, input, output, candidate.
    ``wh`` is the (4H, H) recurrent weight.  Returns ``(h, gates, c, tanh_c)``
    where ``gates`` holds the post-activation gate values.
    """
    B, T, G = xw.shape
    H = G // 4
    gates = np.empty((B, T, G))
    h = np.empty((B, T, H))
    c = np.empty((B, T, H))
    tc = np.empty((B, T, H))
    hp = np.zeros((B, H))
    cp = np.zeros((B, H))
    for t in range(T):
        z = xw[:, t] + hp @ wh.T
        sg = _sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        f, i, o = sg[:, :H], sg[:, H : 2 * H], sg[:, 2 * H :]
        cp = f * cp + i * g
        tcp = np.tanh(cp)
        hp = o * tcp
        gates[:, t, : 3 * H] = sg
        gates[:, t, 3 * H :] = g
        c[:, t] = cp
        tc[:, t] = tcp
        h[:, t] = hp
    return h, gates, c, tc


def lstm_backward(dh_seq, gates, c, tc, h, wh):
    """Backpropagate through :func:`lstm_forward`.

    Returns ``(dz, dwh)``: gradients w.r.t. the gate pre-activations (B, T, 4H)
    and the recurrent weight (4H, H).
    """
    B, T, G = gates.shape
    H = G // 4
    dz = np.empty((B, T, G))
    dwh = np.zeros((G, H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        f = gates[:, t, :H]
        i = gates[:, t, H : 2 * H]
        o = gates[:, t, 2 * H : 3 * H]
        g = gates[:, t, 3 * H :]
        tct = tc[:, t]
        c_prev = c[:, t - 1] if t > 0 else zeros
        h_prev = h[:, t - 1] if t > 0 else zeros
        dh = dh_seq[:, t] + dh_next
        do = dh * tct
        dc = dc_next + dh * o * (1.0 - tct * tct)
        dzt = dz[:, t]
        dzt[:, :H] = dc * c_prev * f * (1.0 - f)
        dzt[:, H : 2 * H] = dc * g * i * (1.0 - i)
        dzt[:, 2 * H : 3 * H] = do * o * (1.0 - o)
        dzt[:, 3 * H :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dzt @ wh
        dwh += dzt.T @ h_prev
    return dz, dwh


def bucket_pool_mask(codes: np.ndarray, n_buckets: int):
    """Union-over-rounds co-membership mask and evaluated score-entry count.

    ``codes`` is (R, L) integer bucket ids.  ``mask[i, j]`` is true when i and
    j share a bucket in at least one round; the count is the sum over rounds
    of squared bucket sizes.
    """
    codes = np.asarray(codes, dtype=np.int64)
    mask = (codes[:, :, None] == codes[:, None, :]).any(axis=0)
    entries = 0
    for row in codes:
        sizes = np.bincount(row, minlength=n_buckets)
        entries += int((sizes * sizes).sum())
    return mask, entries

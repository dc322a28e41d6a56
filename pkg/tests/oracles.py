"""Independent reference computations used as ground truth by the tests.

Everything here is written from the defining formulas with plain loops or
the most direct numpy expression, never by calling package code.
"""
from __future__ import annotations

import math

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


# -- DCT ----------------------------------------------------------------------

def dct_cosine_sum(v) -> np.ndarray:
    """Orthonormal DCT-II by the direct double sum."""
    L = len(v)
    out = np.zeros(L)
    for k in range(L):
        s = 0.0
        for n in range(L):
            s += v[n] * math.cos(math.pi * (2 * n + 1) * k / (2 * L))
        out[k] = s * (math.sqrt(1 / L) if k == 0 else math.sqrt(2 / L))
    return out


# -- attention ----------------------------------------------------------------

def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dense_attention(q, k, v) -> np.ndarray:
    d = q.shape[-1]
    return softmax_rows(q @ np.swapaxes(k, -1, -2) / math.sqrt(d)) @ v


def pooled_attention(q, k, v, codes) -> np.ndarray:
    """Per-query softmax over the union of same-bucket positions across rounds.

    ``codes`` is (rounds, L) for a single sequence; q/k/v are (L, d).
    """
    L, d = q.shape
    out = np.zeros((L, v.shape[1]))
    for i in range(L):
        pool = sorted({j for j in range(L) if j == i or any(codes[r][j] == codes[r][i] for r in range(len(codes)))})
        scores = np.array([q[i] @ k[j] / math.sqrt(d) for j in pool])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        out[i] = sum(wj * v[j] for wj, j in zip(w, pool))
    return out


def angular_bucket(x: np.ndarray, rotation: np.ndarray) -> int:
    """argmax over [xR, -xR] of the unit vector."""
    u = x / np.linalg.norm(x)
    p = u @ rotation
    return int(np.argmax(np.concatenate([p, -p])))


# -- LSTM ---------------------------------------------------------------------

def _sig(z):
    return 1 / (1 + np.exp(-z))


def lstm_loop(x, Wf, Wi, Wo, Wc, bf, bi, bo, bc) -> np.ndarray:
    """Hidden states of a single-layer LSTM, one step at a time per batch row."""
    B, T, _ = x.shape
    H = Wf.shape[0]
    out = np.zeros((B, T, H))
    for b in range(B):
        h = np.zeros(H)
        c = np.zeros(H)
        for t in range(T):
            z = np.concatenate([x[b, t], h])
            f = _sig(Wf @ z + bf)
            i = _sig(Wi @ z + bi)
            o = _sig(Wo @ z + bo)
            g = np.tanh(Wc @ z + bc)
            c = f * c + i * g
            h = o * np.tanh(c)
            out[b, t] = h
    return out


# -- metrics ------------------------------------------------------------------

def mse(y, p):
    return sum((a - b) ** 2 for a, b in zip(y, p)) / len(y)


def mae(y, p):
    return sum(abs(a - b) for a, b in zip(y, p)) / len(y)


def mape(y, p, eps=1e-6):
    terms = [abs((a - b) / a) for a, b in zip(y, p) if abs(a) >= eps]
    return 100 * sum(terms) / len(terms), len(y) - len(terms)


# -- data ---------------------------------------------------------------------

def robust_clip_bounds(values, z=5.0):
    vals = sorted(v for v in values if v == v)
    n = len(vals)
    med = (vals[n // 2] + vals[(n - 1) // 2]) / 2
    dev = sorted(abs(v - med) for v in vals)
    mad = (dev[n // 2] + dev[(n - 1) // 2]) / 2
    return med - z * 1.4826 * mad, med + z * 1.4826 * mad


def autocorr(x, lag):
    x = np.asarray(x, dtype=float) - np.mean(x)
    return float(np.sum(x[:-lag] * x[lag:]) / np.sum(x * x))


# -- FECAM --------------------------------------------------------------------

def fecam(x, W1, W2, gamma, beta, eps=1e-5):
    """Gate each channel by its cosine spectrum, add back, normalise per sample."""
    B, C, L = x.shape
    out = np.zeros_like(x)
    for b in range(B):
        s = np.zeros((C, L))
        for c in range(C):
            freq = dct_cosine_sum(x[b, c])
            hidden = np.maximum(freq @ W1, 0.0)
            gate = 1 / (1 + math.exp(-float(hidden @ W2[:, 0])))
            s[c] = x[b, c] * (1 + gate)
        mu = s.mean()
        var = ((s - mu) ** 2).mean()
        out[b] = (s - mu) / math.sqrt(var + eps) * gamma + beta
    return out
